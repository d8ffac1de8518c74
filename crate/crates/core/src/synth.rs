//! Property-conditioned unigram text models.
//!
//! A [`SyntheticModel`] pretends to have been fine-tuned on data whose property
//! prevalence is `ratio`. Each generated sample draws a latent bit
//! `b ~ Bernoulli(ratio)` and emits an input part then an output part of
//! `sample_len` i.i.d. tokens each.
//!
//! * Chat-completion mode draws both parts from the `b`-conditioned
//!   distributions: the model reproduces the joint input/output data.
//! * Q&A mode draws the output part from the `b`-conditioned distribution but
//!   the elicited input part from a fresh fair coin `b'` that ignores both `b`
//!   and `ratio`: inputs were never part of the loss, so nothing about their
//!   property balance is retained. Per token this is the even average of the
//!   two input distributions.
//!
//! On each side, the signal words of class `b` share `boost` probability mass
//! uniformly and the neutral words share the remainder. Signal words of the
//! other class, and signal words of the other side, have probability zero.
//! Everything is closed form: [`SyntheticModel::expected_containment`] and
//! [`SyntheticModel::exact_token_logprob`] are exact oracles for the
//! word-frequency and perplexity features.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{LabelValue, LabeledDataset, Sample};
use crate::error::{Error, Result};
use crate::model::{GenerationSet, TextModel};
use crate::rng::{derive_seed, hash_str, stream_rng};
use crate::text::tokenize;

pub const DEFAULT_BOOST: f64 = 0.5;
pub const DEFAULT_SAMPLE_LEN: usize = 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FineTuneMode {
    /// Supervised fine-tuning on outputs only.
    #[serde(rename = "qa")]
    QaMode,
    /// Causal LM fine-tuning over the concatenated record.
    #[serde(rename = "cc")]
    ChatCompletionMode,
}

impl FineTuneMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FineTuneMode::QaMode => "qa",
            FineTuneMode::ChatCompletionMode => "cc",
        }
    }

    pub fn parse(s: &str) -> Option<FineTuneMode> {
        match s {
            "qa" | "QA" | "q&a" => Some(FineTuneMode::QaMode),
            "cc" | "CC" | "chat" | "chat-completion" => Some(FineTuneMode::ChatCompletionMode),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Input,
    Output,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabSpec {
    pub neutral_words: Vec<String>,
    #[serde(default)]
    pub x_signal_pos: Vec<String>,
    #[serde(default)]
    pub x_signal_neg: Vec<String>,
    #[serde(default)]
    pub y_signal_pos: Vec<String>,
    #[serde(default)]
    pub y_signal_neg: Vec<String>,
    pub boost: f64,
}

const LAB_NEUTRAL: [&str; 40] = [
    "pain", "fever", "doctor", "question", "medicine", "week", "days", "night", "morning", "sleep",
    "headache", "cough", "tablet", "dose", "blood", "test", "report", "normal", "history", "years",
    "symptoms", "advice", "please", "thanks", "hello", "take", "rest", "water", "diet", "exercise",
    "chest", "back", "skin", "throat", "eyes", "weight", "stress", "checkup", "clinic", "help",
];

fn owned(words: &[&str]) -> Vec<String> {
    words.iter().map(|w| w.to_string()).collect()
}

impl VocabSpec {
    /// The default lab: 40 neutral words and three signal words per side
    /// and class.
    pub fn lab_default() -> VocabSpec {
        VocabSpec {
            neutral_words: owned(&LAB_NEUTRAL),
            x_signal_pos: owned(&["she", "her", "pregnant"]),
            x_signal_neg: owned(&["he", "his", "beard"]),
            y_signal_pos: owned(&["gynecologist", "ovarian", "menstrual"]),
            y_signal_neg: owned(&["prostate", "testicular", "urologist"]),
            boost: DEFAULT_BOOST,
        }
    }

    /// Default lab with the output-side signal removed: the property lives
    /// only in inputs.
    pub fn lab_input_only() -> VocabSpec {
        VocabSpec {
            y_signal_pos: Vec::new(),
            y_signal_neg: Vec::new(),
            ..VocabSpec::lab_default()
        }
    }

    /// `k` neutral words and no signal at all: every token has probability `1/k`.
    pub fn uniform(k: usize) -> VocabSpec {
        VocabSpec {
            neutral_words: (0..k).map(|i| format!("w{i:02}")).collect(),
            x_signal_pos: Vec::new(),
            x_signal_neg: Vec::new(),
            y_signal_pos: Vec::new(),
            y_signal_neg: Vec::new(),
            boost: DEFAULT_BOOST,
        }
    }

    pub fn with_boost(mut self, boost: f64) -> VocabSpec {
        self.boost = boost;
        self
    }

    fn lists(&self) -> [(&'static str, &Vec<String>); 5] {
        [
            ("neutral_words", &self.neutral_words),
            ("x_signal_pos", &self.x_signal_pos),
            ("x_signal_neg", &self.x_signal_neg),
            ("y_signal_pos", &self.y_signal_pos),
            ("y_signal_neg", &self.y_signal_neg),
        ]
    }

    /// Every word of the vocabulary in list order.
    pub fn universe(&self) -> Vec<String> {
        self.lists().iter().flat_map(|(_, l)| l.iter().cloned()).collect()
    }

    /// Positive and negative signal words of the given sides.
    pub fn signal_words(&self, input: bool, output: bool) -> (Vec<String>, Vec<String>) {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        if input {
            pos.extend(self.x_signal_pos.iter().cloned());
            neg.extend(self.x_signal_neg.iter().cloned());
        }
        if output {
            pos.extend(self.y_signal_pos.iter().cloned());
            neg.extend(self.y_signal_neg.iter().cloned());
        }
        (pos, neg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.neutral_words.is_empty() {
            return Err(Error::InvalidVocab("neutral word list is empty".into()));
        }
        if !(self.boost > 0.0 && self.boost <= 1.0) {
            return Err(Error::InvalidVocab(format!("boost {} outside (0, 1]", self.boost)));
        }
        let mut seen: BTreeMap<&str, &str> = BTreeMap::new();
        for (list, words) in self.lists() {
            for w in words {
                if tokenize(w).as_slice() != [w.clone()] {
                    return Err(Error::InvalidVocab(format!(
                        "word `{w}` in {list} is not a single lowercase alphanumeric token"
                    )));
                }
                if let Some(prev) = seen.insert(w, list) {
                    return Err(Error::InvalidVocab(format!(
                        "word `{w}` appears in both {prev} and {list}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Serializable description of a synthetic model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub ratio: f64,
    pub mode: FineTuneMode,
    pub vocab: VocabSpec,
    #[serde(default = "default_sample_len")]
    pub sample_len: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_sample_len() -> usize {
    DEFAULT_SAMPLE_LEN
}

/// Per-token distribution over the vocabulary universe with its CDF.
#[derive(Clone, Debug)]
struct TokenDist {
    probs: Vec<f64>,
    cdf: Vec<f64>,
    last_positive: usize,
}

impl TokenDist {
    fn new(probs: Vec<f64>) -> TokenDist {
        let mut acc = 0.0;
        let cdf = probs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        let last_positive = probs.iter().rposition(|&p| p > 0.0).unwrap_or(0);
        TokenDist {
            probs,
            cdf,
            last_positive,
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        let i = self.cdf.partition_point(|&c| c <= u);
        i.min(self.last_positive)
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticModel {
    config: SyntheticConfig,
    words: Vec<String>,
    index: BTreeMap<String, usize>,
    // [side][bit]
    dists: [[TokenDist; 2]; 2],
    agnostic_input: TokenDist,
}

fn side_slot(side: Side) -> usize {
    match side {
        Side::Input => 0,
        Side::Output => 1,
    }
}

/// Builds a synthetic model. See the module docs for the sampling contract.
pub fn build_generator(
    ratio: f64,
    mode: FineTuneMode,
    vocab: VocabSpec,
    sample_len: usize,
    seed: u64,
) -> Result<SyntheticModel> {
    SyntheticModel::from_config(SyntheticConfig {
        ratio,
        mode,
        vocab,
        sample_len,
        seed,
    })
}

impl SyntheticModel {
    pub fn from_config(config: SyntheticConfig) -> Result<SyntheticModel> {
        if !(0.0..=1.0).contains(&config.ratio) {
            return Err(Error::OutOfRange(config.ratio));
        }
        if config.sample_len == 0 {
            return Err(Error::InvalidArgument("sample_len must be positive".into()));
        }
        config.vocab.validate()?;
        let v = &config.vocab;
        let words = v.universe();
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect::<BTreeMap<_, _>>();

        let build = |signal: &Vec<String>| -> TokenDist {
            let mut probs = vec![0.0; words.len()];
            let neutral_mass = if signal.is_empty() { 1.0 } else { 1.0 - v.boost };
            for w in &v.neutral_words {
                probs[index[w]] = neutral_mass / v.neutral_words.len() as f64;
            }
            for w in signal {
                probs[index[w]] = v.boost / signal.len() as f64;
            }
            TokenDist::new(probs)
        };
        let x0 = build(&v.x_signal_neg);
        let x1 = build(&v.x_signal_pos);
        let y0 = build(&v.y_signal_neg);
        let y1 = build(&v.y_signal_pos);
        let agnostic_input = TokenDist::new(
            x0.probs
                .iter()
                .zip(&x1.probs)
                .map(|(a, b)| 0.5 * (a + b))
                .collect(),
        );
        Ok(SyntheticModel {
            config,
            words,
            index,
            dists: [[x0, x1], [y0, y1]],
            agnostic_input,
        })
    }

    pub fn config(&self) -> &SyntheticConfig {
        &self.config
    }

    pub fn ratio(&self) -> f64 {
        self.config.ratio
    }

    pub fn mode(&self) -> FineTuneMode {
        self.config.mode
    }

    pub fn vocab(&self) -> &VocabSpec {
        &self.config.vocab
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    fn word_index(&self, word: &str) -> Result<usize> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::UnknownWord(word.to_string()))
    }

    /// Per-token distribution on `side` under latent bit `bit`, as emitted by
    /// this model (so the Q&A input side ignores `bit`).
    fn emitted(&self, side: Side, bit: bool) -> &TokenDist {
        match (self.config.mode, side) {
            (FineTuneMode::QaMode, Side::Input) => &self.agnostic_input,
            _ => &self.dists[side_slot(side)][bit as usize],
        }
    }

    /// Probability of `word` per token on `side` given latent bit `bit`.
    pub fn token_prob(&self, word: &str, side: Side, bit: bool) -> Result<f64> {
        let i = self.word_index(word)?;
        Ok(self.emitted(side, bit).probs[i])
    }

    /// Full per-token distribution (vocabulary order) for `side` and `bit`.
    pub fn token_distribution(&self, side: Side, bit: bool) -> &[f64] {
        &self.emitted(side, bit).probs
    }

    /// Probability that one generated sample contains `word` at least once:
    /// `r * c1 + (1 - r) * c0` with `c_b = 1 - prod_side (1 - p_b)^L`. In Q&A
    /// mode the input factor is averaged over the input coin instead.
    pub fn expected_containment(&self, word: &str) -> Result<f64> {
        let i = self.word_index(word)?;
        let len = self.config.sample_len as f64;
        let miss = |dist: &TokenDist| libm::pow(1.0 - dist.probs[i], len);
        let containment = |bit: bool| {
            let input_miss = match self.config.mode {
                // the input class is its own coin, so average whole-part misses
                FineTuneMode::QaMode => 0.5 * (miss(&self.dists[side_slot(Side::Input)][0]) + miss(&self.dists[side_slot(Side::Input)][1])),
                FineTuneMode::ChatCompletionMode => miss(self.emitted(Side::Input, bit)),
            };
            1.0 - input_miss * miss(self.emitted(Side::Output, bit))
        };
        // c0 + r (c1 - c0): exactly c0 whenever the word ignores the bit
        let (c0, c1) = (containment(false), containment(true));
        Ok(c0 + self.config.ratio * (c1 - c0))
    }

    /// `ln(r * p1 + (1 - r) * p0)` for `token` on `side`.
    pub fn exact_token_logprob(&self, token: &str, side: Side) -> Result<f64> {
        let i = self.word_index(token)?;
        let (p0, p1) = (self.emitted(side, false).probs[i], self.emitted(side, true).probs[i]);
        Ok(libm::log(p0 + self.config.ratio * (p1 - p0)))
    }

    /// Side a token position falls on: the first `sample_len` tokens are input.
    pub fn side_at(&self, position: usize) -> Side {
        if position < self.config.sample_len {
            Side::Input
        } else {
            Side::Output
        }
    }

    fn stream_key(&self, prompt: &str, seed: u64) -> u64 {
        derive_seed(self.config.seed, &[seed, hash_str(prompt)])
    }

    fn draw_part<R: Rng>(&self, rng: &mut R, dist: &TokenDist, out: &mut String) {
        for _ in 0..self.config.sample_len {
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(&self.words[dist.sample(rng)]);
        }
    }

    /// Sample `index` of the stream keyed by (`prompt`, `seed`), with its
    /// latent bit.
    pub fn generate_one(&self, prompt: &str, seed: u64, index: u64) -> (String, bool) {
        let mut rng = stream_rng(self.stream_key(prompt, seed), index);
        let bit = rng.gen::<f64>() < self.config.ratio;
        let input = match self.config.mode {
            FineTuneMode::QaMode => &self.dists[side_slot(Side::Input)][rng.gen::<bool>() as usize],
            FineTuneMode::ChatCompletionMode => self.emitted(Side::Input, bit),
        };
        let mut text = String::with_capacity(self.config.sample_len * 16);
        self.draw_part(&mut rng, input, &mut text);
        self.draw_part(&mut rng, self.emitted(Side::Output, bit), &mut text);
        (text, bit)
    }

    /// Draws `n` records from the underlying data distribution (both sides
    /// bit-conditioned regardless of mode), labeled with their latent bit
    /// under `property`.
    pub fn draw_records(&self, n: usize, seed: u64, property: &str) -> LabeledDataset {
        let key = derive_seed(self.config.seed, &[seed, hash_str("records")]);
        let samples = (0..n as u64)
            .map(|i| {
                let mut rng = stream_rng(key, i);
                let bit = rng.gen::<f64>() < self.config.ratio;
                let mut input = String::new();
                let mut output = String::new();
                self.draw_part(&mut rng, &self.dists[0][bit as usize], &mut input);
                self.draw_part(&mut rng, &self.dists[1][bit as usize], &mut output);
                Sample {
                    instruction: String::new(),
                    input,
                    output,
                    labels: BTreeMap::new(),
                }
                .with_label(property, LabelValue::from_bit(bit))
            })
            .collect();
        LabeledDataset::new(
            samples,
            &format!("synthetic(ratio={},seed={},draw={seed})", self.config.ratio, self.config.seed),
        )
    }
}

impl TextModel for SyntheticModel {
    fn model_id(&self) -> String {
        format!(
            "synthetic:{}:r={}:seed={}",
            self.config.mode.as_str(),
            self.config.ratio,
            self.config.seed
        )
    }

    fn generate_batch(&self, prompt: &str, n: usize, seed: u64) -> Result<GenerationSet> {
        if n == 0 {
            return Err(Error::InvalidArgument("n must be at least 1".into()));
        }
        let texts = (0..n as u64).map(|i| self.generate_one(prompt, seed, i).0).collect();
        Ok(GenerationSet::new(&self.model_id(), prompt, texts))
    }

    /// Whitespace tokens; position decides the side.
    fn score_logprobs(&self, text: &str) -> Result<Vec<f64>> {
        text.split_whitespace()
            .enumerate()
            .map(|(pos, tok)| self.exact_token_logprob(tok, self.side_at(pos)))
            .collect()
    }
}
