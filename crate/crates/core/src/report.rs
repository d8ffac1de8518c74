use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::KeywordSelection;
use crate::gen_attack::PromptEstimate;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Generation,
    ShadowWordfreq,
    ShadowPerplexity,
    DirectAsk,
}

impl AttackKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::Generation => "generation",
            AttackKind::ShadowWordfreq => "shadow_wordfreq",
            AttackKind::ShadowPerplexity => "shadow_perplexity",
            AttackKind::DirectAsk => "direct_ask",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub ratios: Vec<f64>,
    pub repeats: usize,
    pub size: usize,
}

/// Meta-regressor features carried no information about the ratio.
pub const FLAG_ZERO_SIGNAL: &str = "ZeroSignal";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub attack_kind: AttackKind,
    pub property: String,
    pub prediction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mae: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keywords: Option<KeywordSelection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<PlanSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_prompt: Option<Vec<PromptEstimate>>,
    #[serde(default)]
    pub seeds: BTreeMap<String, u64>,
    #[serde(default)]
    pub timings: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

impl AttackReport {
    pub fn new(attack_kind: AttackKind, property: &str, prediction: f64) -> AttackReport {
        AttackReport {
            attack_kind,
            property: property.into(),
            prediction,
            ground_truth: None,
            mae: None,
            keywords: None,
            plan: None,
            per_prompt: None,
            seeds: BTreeMap::new(),
            timings: BTreeMap::new(),
            flags: Vec::new(),
        }
    }

    /// Attaches the true ratio and the resulting absolute error.
    pub fn with_ground_truth(mut self, truth: f64) -> Result<AttackReport> {
        self.mae = Some(mae(self.prediction, truth)?);
        self.ground_truth = Some(truth);
        Ok(self)
    }

    pub fn has_flag(&self, flag: &str) -> bool {
        self.flags.iter().any(|f| f == flag)
    }
}

/// Grid that absolute errors are snapped to, so decimal inputs give decimal
/// answers: `mae(0.3173, 0.30)` is the double nearest 0.0173.
const MAE_QUANTUM: f64 = 1e12;

/// Absolute error between a predicted and a true ratio, rounded to 12
/// decimal places.
pub fn mae(prediction: f64, truth: f64) -> Result<f64> {
    for v in [prediction, truth] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::OutOfRange(v));
        }
    }
    Ok(libm::round(libm::fabs(prediction - truth) * MAE_QUANTUM) / MAE_QUANTUM)
}

/// Sample mean and sample standard deviation (n - 1); sd is 0 for one value.
pub fn mean_sd(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Some((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Some((mean, libm::sqrt(var)))
}
