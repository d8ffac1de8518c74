//! Grey-box shadow-model attacks.
//!
//! The adversary subsamples auxiliary data to `k1` known ratios, `k2` times
//! each, obtains one shadow model per dataset through a [`ModelFactory`],
//! featurizes every shadow model, fits a [`MetaRegressor`] from features to
//! ratios, and applies it to the target's features.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::{subsample_to_ratio, true_ratio, LabeledDataset};
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::features::{
    averaged_from_counts, perplexity_features, select_keywords, ContainmentCounts, FrequencyKind,
    FrequencyMatrix, KeywordSelection, Vocabulary,
};
use crate::gbt::{GbtParams, MetaRegressor};
use crate::gen_attack::PromptSet;
use crate::model::TextModel;
use crate::report::{AttackKind, AttackReport, PlanSummary, FLAG_ZERO_SIGNAL};
use crate::rng::derive_seed;
use crate::synth::{FineTuneMode, SyntheticModel, SyntheticConfig, VocabSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShadowPlan {
    pub property: String,
    pub ratios: Vec<f64>,
    pub repeats: usize,
    pub dataset_size: usize,
    pub aux_source: String,
    pub seed: u64,
}

impl ShadowPlan {
    pub fn n_models(&self) -> usize {
        self.ratios.len() * self.repeats
    }

    pub fn summary(&self) -> PlanSummary {
        PlanSummary {
            ratios: self.ratios.clone(),
            repeats: self.repeats,
            size: self.dataset_size,
        }
    }
}

/// One shadow training set, cell `(ratio_index, repeat_index)` of the plan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShadowDataset {
    pub ratio_index: usize,
    pub repeat_index: usize,
    pub target_ratio: f64,
    pub achieved_ratio: f64,
    pub seed: u64,
    pub dataset: LabeledDataset,
}

/// `k1` evenly spaced ratios from `lo` to `hi` inclusive.
pub fn ratio_grid(lo: f64, hi: f64, k1: usize) -> Vec<f64> {
    match k1 {
        0 => Vec::new(),
        1 => alloc::vec![lo],
        _ => (0..k1)
            .map(|i| {
                let v = lo + (hi - lo) * i as f64 / (k1 - 1) as f64;
                // keep grid points like 0.3 free of representation drift
                libm::round(v * 1e12) / 1e12
            })
            .collect(),
    }
}

/// Subsamples `ratios.len() * repeats` shadow datasets from `aux`.
pub fn build_shadow_plan(
    aux: &LabeledDataset,
    property: &str,
    ratios: &[f64],
    repeats: usize,
    size: usize,
    seed: u64,
) -> Result<(ShadowPlan, Vec<ShadowDataset>)> {
    if ratios.is_empty() || repeats == 0 {
        return Err(Error::InvalidArgument("shadow plan needs at least one ratio and one repeat".into()));
    }
    if ratios.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidArgument("shadow ratios must be strictly increasing".into()));
    }
    let mut datasets = Vec::with_capacity(ratios.len() * repeats);
    for (i, &r) in ratios.iter().enumerate() {
        for j in 0..repeats {
            let cell_seed = derive_seed(seed, &[i as u64, j as u64]);
            let dataset = subsample_to_ratio(aux, property, r, size, cell_seed)?;
            let achieved_ratio = true_ratio(&dataset, property)?;
            datasets.push(ShadowDataset {
                ratio_index: i,
                repeat_index: j,
                target_ratio: r,
                achieved_ratio,
                seed: cell_seed,
                dataset,
            });
        }
    }
    let plan = ShadowPlan {
        property: property.to_string(),
        ratios: ratios.to_vec(),
        repeats,
        dataset_size: size,
        aux_source: aux.source.clone(),
        seed,
    };
    Ok((plan, datasets))
}

/// Stand-in for "fine-tune a model on this shadow dataset".
pub trait ModelFactory {
    type Model: TextModel + Sync;

    fn build(&self, shadow: &ShadowDataset, seed: u64) -> Result<Self::Model>;
}

/// Builds lab models whose latent ratio is the shadow dataset's true ratio.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticFactory {
    pub property: String,
    pub mode: FineTuneMode,
    pub vocab: VocabSpec,
    pub sample_len: usize,
}

impl SyntheticFactory {
    pub fn model_for_ratio(&self, ratio: f64, seed: u64) -> Result<SyntheticModel> {
        SyntheticModel::from_config(SyntheticConfig {
            ratio,
            mode: self.mode,
            vocab: self.vocab.clone(),
            sample_len: self.sample_len,
            seed,
        })
    }
}

impl ModelFactory for SyntheticFactory {
    type Model = SyntheticModel;

    fn build(&self, shadow: &ShadowDataset, seed: u64) -> Result<SyntheticModel> {
        let ratio = true_ratio(&shadow.dataset, &self.property)?;
        self.model_for_ratio(ratio, seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShadowRecord {
    pub model_id: String,
    pub ground_ratio: f64,
    pub features: Vec<f64>,
    pub ratio_index: usize,
    pub repeat_index: usize,
    pub model_seed: u64,
    pub generation_seed: u64,
}

#[derive(Clone, Debug)]
pub struct WordFreqConfig {
    pub prompts: PromptSet,
    pub n_gen: usize,
    pub d_keywords: usize,
    pub gbt: GbtParams,
    pub kind: FrequencyKind,
    pub seed: u64,
}

/// Everything the word-frequency attack computed on the way to its report.
#[derive(Clone, Debug)]
pub struct WordFreqOutcome {
    pub report: AttackReport,
    /// Full shadow matrix over the shadow vocabulary.
    pub matrix: FrequencyMatrix,
    pub selection: KeywordSelection,
    /// Records carry the keyword-restricted features.
    pub records: Vec<ShadowRecord>,
    pub target_features: Vec<f64>,
    pub meta: MetaRegressor,
}

fn model_seed(seed: u64, d: &ShadowDataset) -> u64 {
    derive_seed(seed, &[1, d.ratio_index as u64, d.repeat_index as u64])
}

fn generation_seed(seed: u64, d: &ShadowDataset) -> u64 {
    derive_seed(seed, &[2, d.ratio_index as u64, d.repeat_index as u64])
}

fn target_seed(seed: u64) -> u64 {
    derive_seed(seed, &[3])
}

/// Generates `n_gen` texts per prompt and tallies word containment.
pub fn collect_counts<M: TextModel + ?Sized>(
    model: &M,
    prompts: &PromptSet,
    n_gen: usize,
    seed: u64,
) -> Result<Vec<ContainmentCounts>> {
    prompts
        .full_prompts()
        .enumerate()
        .map(|(i, p)| {
            let set = model.generate_batch(&p, n_gen, derive_seed(seed, &[i as u64]))?;
            if set.is_empty() {
                return Err(Error::EmptyGenerationSet { prompt: p });
            }
            Ok(ContainmentCounts::from_set(&set))
        })
        .collect()
}

/// Prompt-averaged frequencies of `model` over `vocab`.
pub fn wordfreq_features<M: TextModel + ?Sized>(
    model: &M,
    vocab: &Vocabulary,
    prompts: &PromptSet,
    n_gen: usize,
    kind: FrequencyKind,
    seed: u64,
) -> Result<Vec<f64>> {
    averaged_from_counts(&collect_counts(model, prompts, n_gen, seed)?, vocab, kind)
}

fn acquire<F, E>(
    datasets: &[ShadowDataset],
    factory: &F,
    seed: u64,
    exec: &E,
) -> Result<Vec<F::Model>>
where
    F: ModelFactory + Sync,
    F::Model: Send,
    E: Executor,
{
    exec.run(datasets.len(), |c| factory.build(&datasets[c], model_seed(seed, &datasets[c])))
        .into_iter()
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.in_stage("acquire shadow models"))
}

fn no_signal(rows: &[Vec<f64>]) -> bool {
    rows.windows(2).all(|w| w[0] == w[1])
}

/// Word-frequency shadow attack.
pub fn run_wordfreq_shadow_attack<F, T, E>(
    plan: &ShadowPlan,
    datasets: &[ShadowDataset],
    factory: &F,
    target: &T,
    cfg: &WordFreqConfig,
    exec: &E,
) -> Result<WordFreqOutcome>
where
    F: ModelFactory + Sync,
    F::Model: Send,
    T: TextModel + ?Sized,
    E: Executor,
{
    if cfg.n_gen == 0 {
        return Err(Error::InvalidArgument("n_gen must be at least 1".into()));
    }
    cfg.prompts.validate()?;
    let models = acquire(datasets, factory, cfg.seed, exec)?;

    let counts = exec
        .run(models.len(), |c| {
            collect_counts(&models[c], &cfg.prompts, cfg.n_gen, generation_seed(cfg.seed, &datasets[c]))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.in_stage("shadow generation"))?;

    // vocabulary comes from shadow generations only
    let vocab = Vocabulary::from_words(
        counts
            .iter()
            .flatten()
            .flat_map(|c| c.containing.keys().cloned())
            .collect::<alloc::collections::BTreeSet<_>>(),
    );
    let rows = counts
        .iter()
        .map(|c| averaged_from_counts(c, &vocab, cfg.kind))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.in_stage("frequency matrix"))?;
    let ids = models.iter().map(|m| m.model_id()).collect();
    let matrix = FrequencyMatrix::new(ids, vocab, rows).map_err(|e| e.in_stage("frequency matrix"))?;
    let ratios: Vec<f64> = datasets.iter().map(|d| d.achieved_ratio).collect();

    let selection = select_keywords(&matrix, &ratios, cfg.d_keywords).map_err(|e| e.in_stage("keyword selection"))?;
    let x = matrix
        .restrict(&selection.keywords)
        .map_err(|e| e.in_stage("keyword selection"))?;
    let meta = MetaRegressor::fit(&x, &ratios, &cfg.gbt).map_err(|e| e.in_stage("meta-regressor fit"))?;

    let target_vocab = Vocabulary::from_words(selection.keywords.iter().cloned());
    let target_counts = collect_counts(target, &cfg.prompts, cfg.n_gen, target_seed(cfg.seed))
        .map_err(|e| e.in_stage("target generation"))?;
    let by_word = averaged_from_counts(&target_counts, &target_vocab, cfg.kind)?;
    let target_features: Vec<f64> = selection
        .keywords
        .iter()
        .map(|w| by_word[target_vocab.position(w).unwrap_or(0)])
        .collect();
    let prediction = meta.predict(&target_features).map_err(|e| e.in_stage("target inference"))?;

    let records = datasets
        .iter()
        .zip(&models)
        .zip(&x)
        .map(|((d, m), f)| ShadowRecord {
            model_id: m.model_id(),
            ground_ratio: d.achieved_ratio,
            features: f.clone(),
            ratio_index: d.ratio_index,
            repeat_index: d.repeat_index,
            model_seed: model_seed(cfg.seed, d),
            generation_seed: generation_seed(cfg.seed, d),
        })
        .collect();

    let mut report = AttackReport::new(AttackKind::ShadowWordfreq, &plan.property, prediction);
    report.keywords = Some(selection.clone());
    report.plan = Some(plan.summary());
    report.seeds.insert("attack".into(), cfg.seed);
    report.seeds.insert("plan".into(), plan.seed);
    report.seeds.insert("target_generation".into(), target_seed(cfg.seed));
    report.seeds.insert("gbt".into(), cfg.gbt.seed);
    if no_signal(&x) {
        report.flags.push(FLAG_ZERO_SIGNAL.to_string());
    }
    Ok(WordFreqOutcome {
        report,
        matrix,
        selection,
        records,
        target_features,
        meta,
    })
}

#[derive(Clone, Debug)]
pub struct PerplexityOutcome {
    pub report: AttackReport,
    pub records: Vec<ShadowRecord>,
    pub target_features: Vec<f64>,
    pub meta: MetaRegressor,
}

/// Perplexity shadow attack: features are the mean perplexities on the
/// all-negative and all-positive holdouts.
#[allow(clippy::too_many_arguments)]
pub fn run_perplexity_shadow_attack<F, T, E>(
    plan: &ShadowPlan,
    datasets: &[ShadowDataset],
    factory: &F,
    target: &T,
    s0: &LabeledDataset,
    s1: &LabeledDataset,
    gbt: &GbtParams,
    seed: u64,
    exec: &E,
) -> Result<PerplexityOutcome>
where
    F: ModelFactory + Sync,
    F::Model: Send,
    T: TextModel + ?Sized,
    E: Executor,
{
    let property = plan.property.as_str();
    let models = acquire(datasets, factory, seed, exec)?;
    let x = exec
        .run(models.len(), |c| {
            perplexity_features(&models[c], s0, s1, property).map(|f| f.to_vec())
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.in_stage("shadow perplexity"))?;
    let ratios: Vec<f64> = datasets.iter().map(|d| d.achieved_ratio).collect();
    let meta = MetaRegressor::fit(&x, &ratios, gbt).map_err(|e| e.in_stage("meta-regressor fit"))?;
    let target_features = perplexity_features(target, s0, s1, property)
        .map_err(|e| e.in_stage("target perplexity"))?
        .to_vec();
    let prediction = meta.predict(&target_features).map_err(|e| e.in_stage("target inference"))?;

    let records = datasets
        .iter()
        .zip(&models)
        .zip(&x)
        .map(|((d, m), f)| ShadowRecord {
            model_id: m.model_id(),
            ground_ratio: d.achieved_ratio,
            features: f.clone(),
            ratio_index: d.ratio_index,
            repeat_index: d.repeat_index,
            model_seed: model_seed(seed, d),
            generation_seed: 0,
        })
        .collect();

    let mut report = AttackReport::new(AttackKind::ShadowPerplexity, property, prediction);
    report.plan = Some(plan.summary());
    report.seeds.insert("attack".into(), seed);
    report.seeds.insert("plan".into(), plan.seed);
    report.seeds.insert("gbt".into(), gbt.seed);
    if x.iter().all(|f| f[0] == f[1]) || no_signal(&x) {
        report.flags.push(FLAG_ZERO_SIGNAL.to_string());
    }
    Ok(PerplexityOutcome {
        report,
        records,
        target_features,
        meta,
    })
}
