//! Labeled samples, property labeling and ratio-controlled subsampling.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::model::TextModel;
use crate::rng::stream_rng;
use crate::text::tokenize;

/// Per-sample value of a binary property.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LabelValue {
    One,
    Zero,
    NotApplicable,
}

impl LabelValue {
    pub fn is_valid(self) -> bool {
        !matches!(self, LabelValue::NotApplicable)
    }

    /// Swaps One and Zero; N/A is unchanged.
    pub fn flipped(self) -> LabelValue {
        match self {
            LabelValue::One => LabelValue::Zero,
            LabelValue::Zero => LabelValue::One,
            LabelValue::NotApplicable => LabelValue::NotApplicable,
        }
    }

    pub fn from_bit(bit: bool) -> LabelValue {
        if bit {
            LabelValue::One
        } else {
            LabelValue::Zero
        }
    }
}

impl fmt::Display for LabelValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LabelValue::One => "1",
            LabelValue::Zero => "0",
            LabelValue::NotApplicable => "na",
        })
    }
}

// On the wire a label is `0`, `1` or `"na"`.
impl Serialize for LabelValue {
    fn serialize<S: Serializer>(&self, s: S) -> core::result::Result<S::Ok, S::Error> {
        match self {
            LabelValue::One => s.serialize_u8(1),
            LabelValue::Zero => s.serialize_u8(0),
            LabelValue::NotApplicable => s.serialize_str("na"),
        }
    }
}

struct LabelVisitor;

impl<'de> Visitor<'de> for LabelVisitor {
    type Value = LabelValue;

    fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("0, 1 or \"na\"")
    }

    fn visit_u64<E: de::Error>(self, v: u64) -> core::result::Result<LabelValue, E> {
        match v {
            0 => Ok(LabelValue::Zero),
            1 => Ok(LabelValue::One),
            _ => Err(E::invalid_value(de::Unexpected::Unsigned(v), &self)),
        }
    }

    fn visit_i64<E: de::Error>(self, v: i64) -> core::result::Result<LabelValue, E> {
        match v {
            0 => Ok(LabelValue::Zero),
            1 => Ok(LabelValue::One),
            _ => Err(E::invalid_value(de::Unexpected::Signed(v), &self)),
        }
    }

    fn visit_str<E: de::Error>(self, v: &str) -> core::result::Result<LabelValue, E> {
        match v {
            "na" | "NA" | "n/a" | "N/A" => Ok(LabelValue::NotApplicable),
            "0" => Ok(LabelValue::Zero),
            "1" => Ok(LabelValue::One),
            _ => Err(E::invalid_value(de::Unexpected::Str(v), &self)),
        }
    }
}

impl<'de> Deserialize<'de> for LabelValue {
    fn deserialize<D: Deserializer<'de>>(d: D) -> core::result::Result<LabelValue, D::Error> {
        d.deserialize_any(LabelVisitor)
    }
}

/// One (instruction, input, output) record.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub instruction: String,
    pub input: String,
    pub output: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub labels: BTreeMap<String, LabelValue>,
}

impl Sample {
    pub fn new(instruction: &str, input: &str, output: &str) -> Sample {
        Sample {
            instruction: instruction.to_string(),
            input: input.to_string(),
            output: output.to_string(),
            labels: BTreeMap::new(),
        }
    }

    pub fn with_label(mut self, property: &str, value: LabelValue) -> Sample {
        self.labels.insert(property.to_string(), value);
        self
    }

    pub fn label(&self, property: &str) -> Option<LabelValue> {
        self.labels.get(property).copied()
    }

    /// Text of the requested side; both sides are joined with one space.
    pub fn side_text(&self, side: TargetSide) -> String {
        match side {
            TargetSide::InputSide => self.input.clone(),
            TargetSide::OutputSide => self.output.clone(),
            TargetSide::BothSides => self.joined_text(),
        }
    }

    pub fn joined_text(&self) -> String {
        format!("{} {}", self.input, self.output)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub samples: Vec<Sample>,
    pub source: String,
}

impl LabeledDataset {
    pub fn new(samples: Vec<Sample>, source: &str) -> LabeledDataset {
        LabeledDataset {
            samples,
            source: source.to_string(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// (count of One, count of Zero) for `property`.
    pub fn class_counts(&self, property: &str) -> (usize, usize) {
        self.samples
            .iter()
            .fold((0, 0), |(ones, zeros), s| match s.label(property) {
                Some(LabelValue::One) => (ones + 1, zeros),
                Some(LabelValue::Zero) => (ones, zeros + 1),
                _ => (ones, zeros),
            })
    }
}

/// Which side of a record carries the property.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSide {
    InputSide,
    OutputSide,
    #[default]
    BothSides,
}

/// A named binary property and the rules used to label it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropertySpec {
    pub name: String,
    #[serde(default)]
    pub positive_keywords: Vec<String>,
    #[serde(default)]
    pub negative_keywords: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classifier_prompt: Option<String>,
    #[serde(default)]
    pub target_side: TargetSide,
}

pub const TEXT_PLACEHOLDER: &str = "{text}";

impl PropertySpec {
    pub fn keywords(name: &str, positive: &[&str], negative: &[&str]) -> PropertySpec {
        PropertySpec {
            name: name.to_string(),
            positive_keywords: positive.iter().map(|w| w.to_string()).collect(),
            negative_keywords: negative.iter().map(|w| w.to_string()).collect(),
            classifier_prompt: None,
            target_side: TargetSide::BothSides,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos: BTreeSet<String> = self.positive_keywords.iter().map(|w| w.to_lowercase()).collect();
        if let Some(w) = self
            .negative_keywords
            .iter()
            .find(|w| pos.contains(&w.to_lowercase()))
        {
            return Err(Error::InvalidPropertySpec(format!(
                "keyword `{w}` is both positive and negative"
            )));
        }
        if let Some(p) = &self.classifier_prompt {
            let n = p.matches(TEXT_PLACEHOLDER).count();
            if n != 1 {
                return Err(Error::InvalidPropertySpec(format!(
                    "classifier prompt must contain exactly one {TEXT_PLACEHOLDER} placeholder, found {n}"
                )));
            }
        }
        Ok(())
    }

    /// Spec with positive and negative classes swapped.
    pub fn complement(&self) -> PropertySpec {
        PropertySpec {
            positive_keywords: self.negative_keywords.clone(),
            negative_keywords: self.positive_keywords.clone(),
            ..self.clone()
        }
    }
}

/// Anything that maps a text to a property label.
pub trait Labeler {
    fn label(&self, text: &str) -> Result<LabelValue>;
}

/// Whole-token, case-insensitive keyword matcher.
#[derive(Clone, Debug)]
pub struct KeywordLabeler {
    positive: BTreeSet<String>,
    negative: BTreeSet<String>,
}

impl KeywordLabeler {
    pub fn new(spec: &PropertySpec) -> KeywordLabeler {
        KeywordLabeler {
            positive: spec.positive_keywords.iter().map(|w| w.to_lowercase()).collect(),
            negative: spec.negative_keywords.iter().map(|w| w.to_lowercase()).collect(),
        }
    }

    pub fn label_text(&self, text: &str) -> LabelValue {
        let mut pos = false;
        let mut neg = false;
        for tok in tokenize(text) {
            pos |= self.positive.contains(&tok);
            neg |= self.negative.contains(&tok);
            if pos && neg {
                return LabelValue::NotApplicable;
            }
        }
        match (pos, neg) {
            (true, false) => LabelValue::One,
            (false, true) => LabelValue::Zero,
            _ => LabelValue::NotApplicable,
        }
    }
}

impl Labeler for KeywordLabeler {
    fn label(&self, text: &str) -> Result<LabelValue> {
        Ok(self.label_text(text))
    }
}

/// One if only positive keywords occur, Zero if only negative ones do,
/// N/A when neither or both occur.
pub fn keyword_label(text: &str, spec: &PropertySpec) -> LabelValue {
    KeywordLabeler::new(spec).label_text(text)
}

/// Labels the side of `sample` named by the spec.
pub fn label_sample<L: Labeler + ?Sized>(
    sample: &Sample,
    spec: &PropertySpec,
    labeler: &L,
) -> Result<LabelValue> {
    labeler.label(&sample.side_text(spec.target_side))
}

/// Labels every sample of `dataset` in place under `spec.name`.
pub fn label_dataset<L: Labeler + ?Sized>(
    dataset: &mut LabeledDataset,
    spec: &PropertySpec,
    labeler: &L,
) -> Result<()> {
    for sample in &mut dataset.samples {
        let v = label_sample(sample, spec, labeler)?;
        sample.labels.insert(spec.name.clone(), v);
    }
    Ok(())
}

pub fn fill_classifier_prompt(spec: &PropertySpec, text: &str) -> Result<String> {
    let template = spec.classifier_prompt.as_ref().ok_or_else(|| {
        Error::InvalidPropertySpec(format!("property `{}` has no classifier prompt", spec.name))
    })?;
    spec.validate()?;
    Ok(template.replacen(TEXT_PLACEHOLDER, text, 1))
}

/// Reads an enumerated classifier answer: "1." means positive, "2." negative,
/// other enumerations N/A. Unnumbered answers fall back to keyword matching.
pub fn parse_classifier_response(response: &str, spec: &PropertySpec) -> LabelValue {
    let r = response.trim_start();
    if r.is_empty() {
        return LabelValue::NotApplicable;
    }
    let digits = r.bytes().take_while(u8::is_ascii_digit).count();
    if digits > 0 && r.as_bytes().get(digits) == Some(&b'.') {
        return match &r[..digits] {
            "1" => LabelValue::One,
            "2" => LabelValue::Zero,
            _ => LabelValue::NotApplicable,
        };
    }
    keyword_label(r, spec)
}

/// Labels `text` by asking `model` with the spec's classifier prompt.
pub fn classify_remote<M: TextModel + ?Sized>(
    text: &str,
    spec: &PropertySpec,
    model: &M,
    seed: u64,
) -> Result<LabelValue> {
    let prompt = fill_classifier_prompt(spec, text)?;
    let set = model.generate_batch(&prompt, 1, seed)?;
    Ok(set
        .texts
        .first()
        .map(|t| parse_classifier_response(t, spec))
        .unwrap_or(LabelValue::NotApplicable))
}

/// [`Labeler`] backed by a classifier model.
pub struct ClassifierLabeler<'a, M: TextModel + ?Sized> {
    pub spec: &'a PropertySpec,
    pub model: &'a M,
    pub seed: u64,
}

impl<M: TextModel + ?Sized> Labeler for ClassifierLabeler<'_, M> {
    fn label(&self, text: &str) -> Result<LabelValue> {
        classify_remote(text, self.spec, self.model, self.seed)
    }
}

/// Fraction of One among samples labeled One or Zero.
pub fn true_ratio(dataset: &LabeledDataset, property: &str) -> Result<f64> {
    let (ones, zeros) = dataset.class_counts(property);
    if ones + zeros == 0 {
        return Err(Error::NoLabeledSamples {
            property: property.to_string(),
        });
    }
    Ok(ones as f64 / (ones + zeros) as f64)
}

/// Number of positive samples a dataset of `size` must hold for `ratio`
/// (half-up rounding).
pub fn positive_count(ratio: f64, size: usize) -> usize {
    libm::floor(ratio * size as f64 + 0.5) as usize
}

/// Index-level subsample: returns positions into `dataset.samples`.
pub fn subsample_indices(
    dataset: &LabeledDataset,
    property: &str,
    target_ratio: f64,
    size: usize,
    seed: u64,
    with_replacement: bool,
) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&target_ratio) {
        return Err(Error::OutOfRange(target_ratio));
    }
    if size == 0 {
        return Err(Error::InvalidArgument("subsample size must be positive".into()));
    }
    let mut ones = Vec::new();
    let mut zeros = Vec::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        match s.label(property) {
            Some(LabelValue::One) => ones.push(i),
            Some(LabelValue::Zero) => zeros.push(i),
            _ => {}
        }
    }
    let need_one = positive_count(target_ratio, size);
    let need_zero = size - need_one;
    let feasible = if with_replacement {
        (need_one == 0 || !ones.is_empty()) && (need_zero == 0 || !zeros.is_empty())
    } else {
        need_one <= ones.len() && need_zero <= zeros.len()
    };
    if !feasible {
        return Err(Error::InfeasibleRatio {
            ratio: target_ratio,
            required_one: need_one,
            available_one: ones.len(),
            required_zero: need_zero,
            available_zero: zeros.len(),
        });
    }

    let mut rng = stream_rng(seed, 0);
    let mut picked = Vec::with_capacity(size);
    for (pool, need) in [(&mut ones, need_one), (&mut zeros, need_zero)] {
        if with_replacement {
            picked.extend((0..need).map(|_| pool[rng.gen_range(0..pool.len())]));
        } else {
            let (chosen, _) = pool.partial_shuffle(&mut rng, need);
            picked.extend_from_slice(chosen);
        }
    }
    picked.shuffle(&mut rng);
    Ok(picked)
}

/// Draws `size` samples with exactly `round(target_ratio * size)` positives,
/// uniformly without replacement inside each class.
pub fn subsample_to_ratio(
    dataset: &LabeledDataset,
    property: &str,
    target_ratio: f64,
    size: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    subsample_to_ratio_with(dataset, property, target_ratio, size, seed, false)
}

pub fn subsample_to_ratio_with(
    dataset: &LabeledDataset,
    property: &str,
    target_ratio: f64,
    size: usize,
    seed: u64,
    with_replacement: bool,
) -> Result<LabeledDataset> {
    let idx = subsample_indices(dataset, property, target_ratio, size, seed, with_replacement)?;
    Ok(LabeledDataset {
        samples: idx.into_iter().map(|i| dataset.samples[i].clone()).collect(),
        source: format!(
            "{}|subsample(property={property},ratio={target_ratio},size={size},seed={seed})",
            dataset.source
        ),
    })
}
