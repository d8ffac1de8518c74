//! Shadow-model features: word containment frequencies, univariate F-test
//! keyword selection, and hold-out perplexities.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::corpus::{LabelValue, LabeledDataset};
use crate::error::{Error, Result};
use crate::model::{sequence_perplexity, GenerationSet, TextModel};
use crate::text::tokenize;

/// Sorted, deduplicated, lowercase word list.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    words: Vec<String>,
}

impl Vocabulary {
    pub fn from_words<I: IntoIterator<Item = String>>(words: I) -> Vocabulary {
        let mut words: Vec<String> = words.into_iter().map(|w| w.to_lowercase()).collect();
        words.sort_unstable();
        words.dedup();
        Vocabulary { words }
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn position(&self, word: &str) -> Option<usize> {
        self.words.binary_search_by(|w| w.as_str().cmp(word)).ok()
    }
}

/// Per-word document counts of one generation set.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ContainmentCounts {
    pub n_texts: usize,
    /// Texts containing the word at least once.
    pub containing: BTreeMap<String, usize>,
    /// Total occurrences, for count-based ablations.
    pub occurrences: BTreeMap<String, usize>,
}

impl ContainmentCounts {
    pub fn from_texts<S: AsRef<str>>(texts: &[S]) -> ContainmentCounts {
        let mut counts = ContainmentCounts {
            n_texts: texts.len(),
            ..ContainmentCounts::default()
        };
        for t in texts {
            let mut toks = tokenize(t.as_ref());
            toks.sort_unstable();
            let mut prev: Option<&String> = None;
            for tok in &toks {
                *counts.occurrences.entry(tok.clone()).or_default() += 1;
                if prev != Some(tok) {
                    *counts.containing.entry(tok.clone()).or_default() += 1;
                }
                prev = Some(tok);
            }
        }
        counts
    }

    pub fn from_set(set: &GenerationSet) -> ContainmentCounts {
        ContainmentCounts::from_texts(&set.texts)
    }

    pub fn frequency(&self, word: &str) -> f64 {
        if self.n_texts == 0 {
            return 0.0;
        }
        self.containing.get(word).copied().unwrap_or(0) as f64 / self.n_texts as f64
    }

    pub fn mean_count(&self, word: &str) -> f64 {
        if self.n_texts == 0 {
            return 0.0;
        }
        self.occurrences.get(word).copied().unwrap_or(0) as f64 / self.n_texts as f64
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrequencyKind {
    /// Fraction of texts containing the word.
    #[default]
    Containment,
    /// Mean occurrences per text. Not bounded by 1.
    MeanCount,
}

/// Union of the tokens of every text in every set.
pub fn build_vocabulary<'a, I>(sets: I) -> Vocabulary
where
    I: IntoIterator<Item = &'a GenerationSet>,
{
    let mut words = alloc::collections::BTreeSet::new();
    for set in sets {
        for t in &set.texts {
            words.extend(tokenize(t));
        }
    }
    Vocabulary {
        words: words.into_iter().collect(),
    }
}

/// Fraction of texts of `set` containing `word` at least once.
pub fn containment_frequency(set: &GenerationSet, word: &str) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::EmptyGenerationSet {
            prompt: set.prompt.clone(),
        });
    }
    let word = word.to_lowercase();
    let hits = set
        .texts
        .iter()
        .filter(|t| tokenize(t).contains(&word))
        .count();
    Ok(hits as f64 / set.len() as f64)
}

/// Per-word mean of per-prompt frequencies, in vocabulary order.
pub fn prompt_averaged_frequencies(
    per_prompt: &[GenerationSet],
    vocab: &Vocabulary,
    kind: FrequencyKind,
) -> Result<Vec<f64>> {
    let counts = per_prompt
        .iter()
        .map(|s| {
            if s.is_empty() {
                Err(Error::EmptyGenerationSet {
                    prompt: s.prompt.clone(),
                })
            } else {
                Ok(ContainmentCounts::from_set(s))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    averaged_from_counts(&counts, vocab, kind)
}

pub fn averaged_from_counts(
    counts: &[ContainmentCounts],
    vocab: &Vocabulary,
    kind: FrequencyKind,
) -> Result<Vec<f64>> {
    if counts.is_empty() {
        return Err(Error::InvalidArgument("no prompts to average over".into()));
    }
    let t = counts.len() as f64;
    Ok(vocab
        .words()
        .iter()
        .map(|w| {
            counts
                .iter()
                .map(|c| match kind {
                    FrequencyKind::Containment => c.frequency(w),
                    FrequencyKind::MeanCount => c.mean_count(w),
                })
                .sum::<f64>()
                / t
        })
        .collect())
}

/// Rows are models, columns follow the vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyMatrix {
    pub model_ids: Vec<String>,
    pub vocab: Vocabulary,
    pub values: Vec<Vec<f64>>,
}

impl FrequencyMatrix {
    pub fn new(model_ids: Vec<String>, vocab: Vocabulary, values: Vec<Vec<f64>>) -> Result<FrequencyMatrix> {
        if model_ids.len() != values.len() {
            return Err(Error::LengthMismatch {
                left: model_ids.len(),
                right: values.len(),
            });
        }
        if let Some(row) = values.iter().find(|r| r.len() != vocab.len()) {
            return Err(Error::DimensionMismatch {
                expected: vocab.len(),
                got: row.len(),
            });
        }
        Ok(FrequencyMatrix {
            model_ids,
            vocab,
            values,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.values.len()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.values.iter().map(|r| r[j]).collect()
    }

    /// Keeps only the given words, in the given order.
    pub fn restrict(&self, words: &[String]) -> Result<Vec<Vec<f64>>> {
        let cols = words
            .iter()
            .map(|w| self.vocab.position(w).ok_or_else(|| Error::UnknownWord(w.clone())))
            .collect::<Result<Vec<_>>>()?;
        Ok(self
            .values
            .iter()
            .map(|r| cols.iter().map(|&j| r[j]).collect())
            .collect())
    }
}

/// Univariate regression F statistic `rho^2 / (1 - rho^2) * (m - 2)`.
/// Constant feature or target gives 0; a perfect linear fit gives +inf.
pub fn f_statistic(feature: &[f64], targets: &[f64]) -> Result<f64> {
    if feature.len() != targets.len() {
        return Err(Error::LengthMismatch {
            left: feature.len(),
            right: targets.len(),
        });
    }
    let m = feature.len();
    if m < 3 {
        return Err(Error::TooFewSamples { needed: 3, got: m });
    }
    let constant = |v: &[f64]| v.iter().all(|&x| x == v[0]);
    if constant(feature) || constant(targets) {
        return Ok(0.0);
    }
    let n = m as f64;
    let mx = feature.iter().sum::<f64>() / n;
    let my = targets.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in feature.iter().zip(targets) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    let rho2 = (sxy * sxy) / (sxx * syy);
    if rho2 >= 1.0 {
        return Ok(f64::INFINITY);
    }
    Ok(rho2 / (1.0 - rho2) * (n - 2.0))
}

mod inf_as_string {
    use alloc::vec::Vec;
    use serde::de::Error as _;
    use serde::ser::SerializeSeq;
    use serde::{Deserialize, Deserializer, Serializer};

    #[derive(serde::Deserialize)]
    #[serde(untagged)]
    enum Score {
        Num(f64),
        Text(alloc::string::String),
    }

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(v.len()))?;
        for x in v {
            if x.is_infinite() {
                seq.serialize_element("inf")?;
            } else {
                seq.serialize_element(x)?;
            }
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Vec::<Score>::deserialize(d)?
            .into_iter()
            .map(|s| match s {
                Score::Num(x) => Ok(x),
                Score::Text(t) if t == "inf" => Ok(f64::INFINITY),
                Score::Text(t) => Err(D::Error::custom(alloc::format!("bad F score {t:?}"))),
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeywordSelection {
    pub keywords: Vec<String>,
    /// Parallel to `keywords`; perfect fits are `+inf` (`"inf"` in JSON).
    #[serde(with = "inf_as_string")]
    pub f_scores: Vec<f64>,
}

/// F score descending, +inf first, ties by word.
fn rank_order(a: (&String, f64), b: (&String, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0))
}

/// Top-`d` vocabulary words by univariate F against `ratios`.
pub fn select_keywords(matrix: &FrequencyMatrix, ratios: &[f64], d: usize) -> Result<KeywordSelection> {
    if ratios.len() != matrix.n_rows() {
        return Err(Error::LengthMismatch {
            left: matrix.n_rows(),
            right: ratios.len(),
        });
    }
    if d == 0 {
        return Err(Error::InvalidArgument("d must be at least 1".into()));
    }
    let mut scored = (0..matrix.vocab.len())
        .map(|j| Ok((&matrix.vocab.words()[j], f_statistic(&matrix.column(j), ratios)?)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| rank_order(*a, *b));
    scored.truncate(d);
    Ok(KeywordSelection {
        keywords: scored.iter().map(|(w, _)| (*w).clone()).collect(),
        f_scores: scored.iter().map(|(_, f)| *f).collect(),
    })
}

fn check_holdout(set: &LabeledDataset, property: &str, expected: LabelValue) -> Result<()> {
    if set.is_empty() {
        return Err(Error::EmptyHoldout);
    }
    match set.samples.iter().position(|s| s.label(property) != Some(expected)) {
        Some(index) => Err(Error::HoldoutContamination { index }),
        None => Ok(()),
    }
}

fn mean_perplexity<M: TextModel + ?Sized>(model: &M, set: &LabeledDataset) -> Result<f64> {
    let mut total = 0.0;
    for s in &set.samples {
        total += sequence_perplexity(model, &s.joined_text())?;
    }
    Ok(total / set.len() as f64)
}

/// Mean perplexity of `model` on the all-negative and all-positive holdouts.
pub fn perplexity_features<M: TextModel + ?Sized>(
    model: &M,
    s0: &LabeledDataset,
    s1: &LabeledDataset,
    property: &str,
) -> Result<[f64; 2]> {
    check_holdout(s0, property, LabelValue::Zero)?;
    check_holdout(s1, property, LabelValue::One)?;
    Ok([mean_perplexity(model, s0)?, mean_perplexity(model, s1)?])
}

/// Fixed-width rendering with 9 significant digits.
pub fn format_sig9(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let mag = libm::floor(libm::log10(libm::fabs(v))) as i32;
    let decimals = (8 - mag).max(0) as usize;
    format!("{v:.decimals$}")
}
