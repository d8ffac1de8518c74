//! Experiment grid: targets × attacks × seeds, summaries and ablation sweeps.
//!
//! Every cell `(target, attack, repeat)` runs with its own seed
//! `derive_seed(seeds[repeat], [target, attack, repeat])`, so any single cell
//! can be re-run on its own and reproduces exactly. A failing cell is recorded
//! with its error and the rest of the grid carries on.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use propinfer_core::corpus::{label_sample, ClassifierLabeler, KeywordLabeler, Labeler};
use propinfer_core::exec::Executor;
use propinfer_core::features::FrequencyKind;
use propinfer_core::gen_attack::{
    direct_ask, direct_ask_template, run_generation_attack, Aggregation, PromptSet, FRACTION_REQUEST,
};
use propinfer_core::report::mean_sd;
use propinfer_core::rng::derive_seed;
use propinfer_core::shadow::{
    build_shadow_plan, ratio_grid, run_perplexity_shadow_attack, run_wordfreq_shadow_attack,
    SyntheticFactory, WordFreqConfig,
};
use propinfer_core::synth::DEFAULT_SAMPLE_LEN;
use propinfer_core::{
    build_generator, true_ratio, AttackKind, AttackReport, FineTuneMode, GbtParams, LabelValue,
    LabeledDataset, PropertySpec, VocabSpec,
};
use serde::{Deserialize, Serialize};

use crate::endpoint::{AnyFactory, ExternalFactory, ModelEndpoint};
use crate::error::{Error, Result};
use crate::formats::to_canonical_json;
use crate::jsonl::load_jsonl;
use crate::remote::{RemoteModel, RemoteSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSpec {
    /// Lab model with this latent ratio.
    Ratio(f64),
    /// Labeled dataset; its true ratio is the ground truth. The model comes
    /// from the external factory when one is configured, else from the lab.
    Dataset(PathBuf),
    /// An already deployed model.
    Remote {
        #[serde(flatten)]
        spec: RemoteSpec,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        truth: Option<f64>,
    },
}

impl TargetSpec {
    pub fn label(&self) -> String {
        match self {
            TargetSpec::Ratio(r) => format!("{r}"),
            TargetSpec::Dataset(p) => p.display().to_string(),
            TargetSpec::Remote { spec, .. } => spec.url.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationAttack {
    #[serde(default = "default_n_gen")]
    pub n_per_prompt: usize,
    #[serde(default)]
    pub prompts: PromptSet,
    #[serde(default)]
    pub aggregation: Aggregation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordFreqAttack {
    #[serde(default = "default_ratios")]
    pub ratios: Vec<f64>,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default = "default_shadow_size")]
    pub shadow_size: usize,
    #[serde(default = "default_n_gen")]
    pub n_gen: usize,
    #[serde(default = "default_d")]
    pub d_keywords: usize,
    #[serde(default)]
    pub prompts: PromptSet,
    #[serde(default)]
    pub gbt: GbtParams,
    #[serde(default)]
    pub frequency: FrequencyKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerplexityAttack {
    #[serde(default = "default_ratios")]
    pub ratios: Vec<f64>,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default = "default_shadow_size")]
    pub shadow_size: usize,
    #[serde(default)]
    pub gbt: GbtParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectAskAttack {
    /// Property phrase, e.g. "female patient".
    pub phrase: String,
    /// Full prompt; built from the phrase when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackConfig {
    Generation(GenerationAttack),
    ShadowWordfreq(WordFreqAttack),
    ShadowPerplexity(PerplexityAttack),
    DirectAsk(DirectAskAttack),
}

impl AttackConfig {
    pub fn kind(&self) -> AttackKind {
        match self {
            AttackConfig::Generation(_) => AttackKind::Generation,
            AttackConfig::ShadowWordfreq(_) => AttackKind::ShadowWordfreq,
            AttackConfig::ShadowPerplexity(_) => AttackKind::ShadowPerplexity,
            AttackConfig::DirectAsk(_) => AttackKind::DirectAsk,
        }
    }
}

fn default_n_gen() -> usize {
    2000
}
fn default_ratios() -> Vec<f64> {
    ratio_grid(0.2, 0.8, 7)
}
fn default_repeats() -> usize {
    5
}
fn default_shadow_size() -> usize {
    500
}
fn default_d() -> usize {
    10
}

/// Settings of the synthetic lab: target and shadow models, and the
/// auxiliary and holdout data drawn from it when no files are given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabSettings {
    pub vocab: VocabSpec,
    pub sample_len: usize,
    pub aux_ratio: f64,
    pub aux_size: usize,
    pub holdout_size: usize,
}

impl Default for LabSettings {
    fn default() -> Self {
        LabSettings {
            vocab: VocabSpec::lab_default(),
            sample_len: DEFAULT_SAMPLE_LEN,
            aux_ratio: 0.5,
            aux_size: 2000,
            holdout_size: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoldoutFiles {
    pub s0: PathBuf,
    pub s1: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub mode: FineTuneMode,
    pub property: PropertySpec,
    pub targets: Vec<TargetSpec>,
    pub attacks: Vec<AttackConfig>,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub lab: LabSettings,
    /// Auxiliary dataset for shadow plans; drawn from the lab when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aux_dataset: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub holdout: Option<HoldoutFiles>,
    /// Shadow models come from this command instead of the lab.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factory: Option<ExternalFactory>,
    /// Label generations with this classifier instead of keywords.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classifier: Option<RemoteSpec>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.targets.is_empty() {
            return bad("at least one target is required");
        }
        if self.attacks.is_empty() {
            return bad("at least one attack is required");
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        self.property.validate()?;
        self.lab.vocab.validate()?;
        for t in &self.targets {
            if let TargetSpec::Ratio(r) = t {
                if !(0.0..=1.0).contains(r) {
                    return Err(Error::InvalidConfig(format!("target ratio {r} outside [0, 1]")));
                }
            }
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.targets.len() * self.attacks.len() * self.seeds.len()
    }

    /// Cell seed for `(target, attack, repeat)`.
    pub fn cell_seed(&self, target: usize, attack: usize, repeat: usize) -> u64 {
        derive_seed(self.seeds[repeat], &[target as u64, attack as u64, repeat as u64])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub target_index: usize,
    pub attack_index: usize,
    pub repeat_index: usize,
    pub seed: u64,
    pub attack: AttackKind,
    pub mode: FineTuneMode,
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<AttackReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl CellResult {
    pub fn mae(&self) -> Option<f64> {
        self.report.as_ref().and_then(|r| r.mae)
    }
}

/// Mean ± sd of MAE over the seeds of one (attack, target) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryCell {
    pub attack_index: usize,
    pub attack: AttackKind,
    pub target_index: usize,
    pub target: String,
    pub runs: usize,
    pub failed: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_prediction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_mae: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sd_mae: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub cells: Vec<CellResult>,
    pub summary: Vec<SummaryCell>,
}

/// Data shared by all cells, loaded once.
struct Context<'a> {
    config: &'a ExperimentConfig,
    aux: Option<LabeledDataset>,
    holdout: Option<(LabeledDataset, LabeledDataset)>,
    target_data: Vec<Option<LabeledDataset>>,
    classifier: Option<RemoteModel>,
}

fn labeled(mut ds: LabeledDataset, spec: &PropertySpec) -> Result<LabeledDataset> {
    // keyword-label samples that carry no label for the property yet
    let labeler = KeywordLabeler::new(spec);
    for s in ds.samples.iter_mut().filter(|s| s.label(&spec.name).is_none()) {
        let v = label_sample(s, spec, &labeler)?;
        s.labels.insert(spec.name.clone(), v);
    }
    Ok(ds)
}

impl<'a> Context<'a> {
    fn load(config: &'a ExperimentConfig) -> Result<Context<'a>> {
        config.validate()?;
        let prop = &config.property;
        let aux = config
            .aux_dataset
            .as_deref()
            .map(|p| labeled(load_jsonl(p)?, prop))
            .transpose()?;
        let holdout = match &config.holdout {
            Some(h) => Some((labeled(load_jsonl(&h.s0)?, prop)?, labeled(load_jsonl(&h.s1)?, prop)?)),
            None => None,
        };
        let target_data = config
            .targets
            .iter()
            .map(|t| match t {
                TargetSpec::Dataset(p) => labeled(load_jsonl(p)?, prop).map(Some),
                _ => Ok(None),
            })
            .collect::<Result<Vec<_>>>()?;
        let classifier = config.classifier.clone().map(RemoteModel::new).transpose()?;
        Ok(Context {
            config,
            aux,
            holdout,
            target_data,
            classifier,
        })
    }

    fn lab_model(&self, ratio: f64, seed: u64) -> Result<ModelEndpoint> {
        let lab = &self.config.lab;
        Ok(ModelEndpoint::Synthetic(build_generator(
            ratio,
            self.config.mode,
            lab.vocab.clone(),
            lab.sample_len,
            seed,
        )?))
    }

    /// Target model and its ground truth, if known.
    fn target(&self, t: usize, seed: u64) -> Result<(ModelEndpoint, Option<f64>)> {
        match &self.config.targets[t] {
            TargetSpec::Ratio(r) => Ok((self.lab_model(*r, derive_seed(seed, &[0]))?, Some(*r))),
            TargetSpec::Dataset(_) => {
                let ds = self.target_data[t].as_ref().expect("dataset targets are loaded");
                let truth = true_ratio(ds, &self.config.property.name)?;
                let model = match &self.config.factory {
                    Some(f) => {
                        let dir = &f.work_dir;
                        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                        let path = dir.join(format!("target_{t}.jsonl"));
                        crate::jsonl::save_jsonl(ds, &path)?;
                        let spec = RemoteSpec {
                            url: f.invoke(&path)?,
                            ..f.remote.clone()
                        };
                        ModelEndpoint::Remote(RemoteModel::new(spec)?)
                    }
                    None => self.lab_model(truth, derive_seed(seed, &[0]))?,
                };
                Ok((model, Some(truth)))
            }
            TargetSpec::Remote { spec, truth } => Ok((ModelEndpoint::Remote(RemoteModel::new(spec.clone())?), *truth)),
        }
    }

    fn aux(&self, seed: u64) -> Result<LabeledDataset> {
        if let Some(a) = &self.aux {
            return Ok(a.clone());
        }
        let lab = &self.config.lab;
        let model = build_generator(lab.aux_ratio, self.config.mode, lab.vocab.clone(), lab.sample_len, seed)?;
        Ok(model.draw_records(lab.aux_size, 0, &self.config.property.name))
    }

    fn holdouts(&self, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
        if let Some(h) = &self.holdout {
            return Ok(h.clone());
        }
        let lab = &self.config.lab;
        let name = &self.config.property.name;
        let model = build_generator(0.5, self.config.mode, lab.vocab.clone(), lab.sample_len, seed)?;
        let pool = model.draw_records(lab.holdout_size, 0, name);
        let part = |v: LabelValue| {
            LabeledDataset::new(
                pool.samples.iter().filter(|s| s.label(name) == Some(v)).cloned().collect(),
                &format!("{} [{v:?}]", pool.source),
            )
        };
        Ok((part(LabelValue::Zero), part(LabelValue::One)))
    }

    fn factory(&self) -> AnyFactory {
        match &self.config.factory {
            Some(f) => AnyFactory::External(f.clone()),
            None => AnyFactory::Synthetic(SyntheticFactory {
                property: self.config.property.name.clone(),
                mode: self.config.mode,
                vocab: self.config.lab.vocab.clone(),
                sample_len: self.config.lab.sample_len,
            }),
        }
    }

    fn labeler(&self, seed: u64) -> Box<dyn Labeler + '_> {
        match &self.classifier {
            Some(model) => Box::new(ClassifierLabeler {
                spec: &self.config.property,
                model,
                seed,
            }),
            None => Box::new(KeywordLabeler::new(&self.config.property)),
        }
    }

    fn run_attack<E: Executor + Sync>(&self, t: usize, a: usize, seed: u64, exec: &E) -> Result<AttackReport> {
        let (target, truth) = self.target(t, seed)?;
        let name = self.config.property.name.as_str();
        let mut report = match &self.config.attacks[a] {
            AttackConfig::Generation(g) => {
                let labeler = self.labeler(derive_seed(seed, &[4]));
                let est = run_generation_attack(&target, &g.prompts, g.n_per_prompt, &*labeler, seed, g.aggregation)?;
                let mut r = AttackReport::new(AttackKind::Generation, name, est.value);
                r.per_prompt = Some(est.per_prompt);
                r
            }
            AttackConfig::ShadowWordfreq(w) => {
                let aux = self.aux(derive_seed(seed, &[1]))?;
                let (plan, sets) = build_shadow_plan(&aux, name, &w.ratios, w.repeats, w.shadow_size, derive_seed(seed, &[2]))?;
                let cfg = WordFreqConfig {
                    prompts: w.prompts.clone(),
                    n_gen: w.n_gen,
                    d_keywords: w.d_keywords,
                    gbt: w.gbt.clone(),
                    kind: w.frequency,
                    seed: derive_seed(seed, &[3]),
                };
                run_wordfreq_shadow_attack(&plan, &sets, &self.factory(), &target, &cfg, exec)?.report
            }
            AttackConfig::ShadowPerplexity(p) => {
                let aux = self.aux(derive_seed(seed, &[1]))?;
                let (plan, sets) = build_shadow_plan(&aux, name, &p.ratios, p.repeats, p.shadow_size, derive_seed(seed, &[2]))?;
                let (s0, s1) = self.holdouts(derive_seed(seed, &[5]))?;
                run_perplexity_shadow_attack(&plan, &sets, &self.factory(), &target, &s0, &s1, &p.gbt, derive_seed(seed, &[3]), exec)?
                    .report
            }
            AttackConfig::DirectAsk(d) => {
                let template = d
                    .template
                    .clone()
                    .unwrap_or_else(|| direct_ask_template(&d.phrase, "The ratio is "));
                let v = direct_ask(&target, &d.phrase, &template, seed)?;
                AttackReport::new(AttackKind::DirectAsk, name, v)
            }
        };
        report.seeds.insert("cell".into(), seed);
        if let Some(truth) = truth {
            report = report.with_ground_truth(truth)?;
        }
        Ok(report)
    }

    fn run_cell<E: Executor + Sync>(&self, t: usize, a: usize, r: usize, exec: &E) -> CellResult {
        let seed = self.config.cell_seed(t, a, r);
        let start = Instant::now();
        let outcome = self.run_attack(t, a, seed, exec);
        let (report, error) = match outcome {
            Ok(mut rep) => {
                rep.timings.insert("total_secs".into(), start.elapsed().as_secs_f64());
                (Some(rep), None)
            }
            Err(e) => (None, Some(e.to_string())),
        };
        CellResult {
            target_index: t,
            attack_index: a,
            repeat_index: r,
            seed,
            attack: self.config.attacks[a].kind(),
            mode: self.config.mode,
            target: self.config.targets[t].label(),
            report,
            error,
        }
    }
}

/// Runs one cell of the grid on its own.
pub fn run_single_cell<E: Executor + Sync>(
    config: &ExperimentConfig,
    target: usize,
    attack: usize,
    repeat: usize,
    exec: &E,
) -> Result<CellResult> {
    if target >= config.targets.len() || attack >= config.attacks.len() || repeat >= config.seeds.len() {
        return Err(Error::InvalidConfig(format!("no cell ({target}, {attack}, {repeat})")));
    }
    Ok(Context::load(config)?.run_cell(target, attack, repeat, exec))
}

/// Runs the whole grid. Configuration problems abort; cell failures do not.
pub fn run_experiment<E: Executor + Sync>(config: &ExperimentConfig, exec: &E) -> Result<ExperimentOutcome> {
    let ctx = Context::load(config)?;
    let (nt, na, nr) = (config.targets.len(), config.attacks.len(), config.seeds.len());
    let cells = exec.run(nt * na * nr, |c| {
        let (t, a, r) = (c / (na * nr), (c / nr) % na, c % nr);
        ctx.run_cell(t, a, r, exec)
    });
    let summary = summarize(config, &cells);
    Ok(ExperimentOutcome { cells, summary })
}

pub fn summarize(config: &ExperimentConfig, cells: &[CellResult]) -> Vec<SummaryCell> {
    let mut out = Vec::new();
    for (a, attack) in config.attacks.iter().enumerate() {
        for (t, target) in config.targets.iter().enumerate() {
            let group: Vec<&CellResult> = cells
                .iter()
                .filter(|c| c.attack_index == a && c.target_index == t)
                .collect();
            let preds: Vec<f64> = group.iter().filter_map(|c| c.report.as_ref().map(|r| r.prediction)).collect();
            let maes: Vec<f64> = group.iter().filter_map(|c| c.mae()).collect();
            let ms = mean_sd(&maes);
            out.push(SummaryCell {
                attack_index: a,
                attack: attack.kind(),
                target_index: t,
                target: target.label(),
                runs: group.len(),
                failed: group.iter().filter(|c| c.report.is_none()).count(),
                mean_prediction: mean_sd(&preds).map(|p| p.0),
                mean_mae: ms.map(|m| m.0),
                sd_mae: ms.map(|m| m.1),
            });
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    KeywordsD,
    ShadowCount,
    GenCount,
}

impl AblationAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            AblationAxis::KeywordsD => "keywords_d",
            AblationAxis::ShadowCount => "shadow_count",
            AblationAxis::GenCount => "gen_count",
        }
    }

    /// `attack` with the axis set to `value`.
    pub fn apply(self, attack: &AttackConfig, value: usize) -> Result<AttackConfig> {
        let inapplicable = || Error::InapplicableAxis {
            axis: self.as_str().into(),
            attack: attack.kind().as_str().into(),
        };
        let shadows = |ratios: &[f64]| -> Result<usize> {
            let k1 = ratios.len();
            if k1 == 0 || !value.is_multiple_of(k1) || value == 0 {
                return Err(Error::InvalidConfig(format!(
                    "shadow count {value} is not a positive multiple of the {k1} plan ratios"
                )));
            }
            Ok(value / k1)
        };
        let mut out = attack.clone();
        match (self, &mut out) {
            (AblationAxis::KeywordsD, AttackConfig::ShadowWordfreq(w)) => w.d_keywords = value,
            (AblationAxis::ShadowCount, AttackConfig::ShadowWordfreq(w)) => w.repeats = shadows(&w.ratios)?,
            (AblationAxis::ShadowCount, AttackConfig::ShadowPerplexity(p)) => p.repeats = shadows(&p.ratios)?,
            (AblationAxis::GenCount, AttackConfig::Generation(g)) => g.n_per_prompt = value,
            (AblationAxis::GenCount, AttackConfig::ShadowWordfreq(w)) => w.n_gen = value,
            _ => return Err(inapplicable()),
        }
        Ok(out)
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<AblationAxis> {
        match s.replace('-', "_").as_str() {
            "keywords_d" | "d" => Ok(AblationAxis::KeywordsD),
            "shadow_count" => Ok(AblationAxis::ShadowCount),
            "gen_count" => Ok(AblationAxis::GenCount),
            _ => Err(Error::InvalidConfig(format!("unknown ablation axis `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: usize,
    pub runs: usize,
    pub failed: usize,
    pub mean_mae: Option<f64>,
    pub sd_mae: Option<f64>,
    /// MAE of every cell in grid order (failed cells left out).
    pub maes: Vec<f64>,
}

/// One grid run per value with everything else, seeds included, held fixed.
pub fn ablation_sweep<E: Executor + Sync>(
    config: &ExperimentConfig,
    axis: AblationAxis,
    values: &[usize],
    exec: &E,
) -> Result<Vec<SweepPoint>> {
    let configs = values
        .iter()
        .map(|&v| {
            let attacks = config
                .attacks
                .iter()
                .map(|a| axis.apply(a, v))
                .collect::<Result<Vec<_>>>()?;
            Ok(ExperimentConfig {
                attacks,
                ..config.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    configs
        .iter()
        .zip(values)
        .map(|(cfg, &value)| {
            let outcome = run_experiment(cfg, exec)?;
            let maes: Vec<f64> = outcome.cells.iter().filter_map(CellResult::mae).collect();
            let ms = mean_sd(&maes);
            Ok(SweepPoint {
                value,
                runs: outcome.cells.len(),
                failed: outcome.cells.iter().filter(|c| c.report.is_none()).count(),
                mean_mae: ms.map(|m| m.0),
                sd_mae: ms.map(|m| m.1),
                maes,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Json,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<ReportFormat> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            _ => Err(Error::InvalidConfig(format!("unknown report format `{s}`"))),
        }
    }
}

pub const CSV_COLUMNS: [&str; 7] = ["attack", "mode", "target", "seed", "prediction", "truth", "mae"];

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn render_csv(cells: &[CellResult]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_COLUMNS)?;
    for c in cells {
        let rep = c.report.as_ref();
        w.write_record([
            c.attack.as_str().to_string(),
            c.mode.as_str().to_string(),
            c.target.clone(),
            c.seed.to_string(),
            opt(rep.map(|r| r.prediction)),
            opt(rep.and_then(|r| r.ground_truth)),
            opt(rep.and_then(|r| r.mae)),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Csv(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Writes cell results as canonical JSON (full reports) or as the flat CSV.
pub fn write_report(cells: &[CellResult], path: &Path, format: ReportFormat) -> Result<()> {
    let text = match format {
        ReportFormat::Json => to_canonical_json(&cells)?,
        ReportFormat::Csv => render_csv(cells)?,
    };
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `cells.json`, `cells.csv` and `summary.json` into `dir`.
pub fn write_outcome(outcome: &ExperimentOutcome, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_report(&outcome.cells, &dir.join("cells.json"), ReportFormat::Json)?;
    write_report(&outcome.cells, &dir.join("cells.csv"), ReportFormat::Csv)?;
    let summary = dir.join("summary.json");
    std::fs::write(&summary, to_canonical_json(&outcome.summary)?).map_err(|e| Error::io(&summary, e))
}

/// Lab experiment over `targets` with default settings, handy for tests and
/// the CLI.
pub fn lab_config(mode: FineTuneMode, targets: &[f64], attacks: Vec<AttackConfig>, seeds: Vec<u64>) -> ExperimentConfig {
    let vocab = VocabSpec::lab_default();
    ExperimentConfig {
        mode,
        property: lab_property(&vocab, "gender"),
        targets: targets.iter().map(|&r| TargetSpec::Ratio(r)).collect(),
        attacks,
        seeds,
        output_dir: None,
        lab: LabSettings {
            vocab,
            ..LabSettings::default()
        },
        aux_dataset: None,
        holdout: None,
        factory: None,
        classifier: None,
    }
}

/// Property spec whose keywords are the lab vocabulary's signal words.
pub fn lab_property(vocab: &VocabSpec, name: &str) -> PropertySpec {
    let pos: Vec<&str> = vocab.x_signal_pos.iter().chain(&vocab.y_signal_pos).map(String::as_str).collect();
    let neg: Vec<&str> = vocab.x_signal_neg.iter().chain(&vocab.y_signal_neg).map(String::as_str).collect();
    PropertySpec::keywords(name, &pos, &neg)
}

/// Checks a direct-ask template the same way the attack will.
pub fn check_template(phrase: &str, template: &str) -> bool {
    template.contains(phrase) && template.contains(FRACTION_REQUEST)
}
