use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use propinfer_core::corpus::{label_sample, subsample_to_ratio_with, ClassifierLabeler, KeywordLabeler, Labeler};
use propinfer_core::gen_attack::{direct_ask, direct_ask_template, run_generation_attack, Aggregation, PromptSet};
use propinfer_core::shadow::{
    build_shadow_plan, ratio_grid, run_perplexity_shadow_attack, run_wordfreq_shadow_attack,
    SyntheticFactory, WordFreqConfig,
};
use propinfer_core::synth::{SyntheticConfig, DEFAULT_SAMPLE_LEN};
use propinfer_core::{
    true_ratio, AttackReport, DecodeParams, FineTuneMode, GbtParams, LabeledDataset,
    PropertySpec, SyntheticModel, TextModel, VocabSpec,
};
use propinfer::endpoint::{AnyFactory, EndpointSpec, ExternalFactory, ModelEndpoint};
use propinfer::experiment::{
    ablation_sweep, run_experiment, write_outcome, AblationAxis, ExperimentConfig, ReportFormat,
};
use propinfer::formats::{save_json, save_matrix_csv, to_canonical_json, GenerationReport};
use propinfer::jsonl::{load_jsonl, save_jsonl, write_jsonl};
use propinfer::par::Parallel;
use propinfer::remote::RemoteSpec;

#[derive(Parser)]
#[command(name = "propinfer", version, about = "Infer dataset property ratios from text models")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Base URL of a completions endpoint to attack.
    #[arg(long, global = true)]
    endpoint_url: Option<String>,
    /// Model name sent to the remote endpoint.
    #[arg(long, global = true, default_value = "")]
    model: String,
    /// Endpoint handle file written by `lab build`.
    #[arg(long, global = true)]
    endpoint: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, global = true, default_value_t = 256)]
    max_tokens: usize,
    /// Output file (or directory for `experiment run`); stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, default_value = "json")]
    format: String,
    /// Worker threads; all cores when absent.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Attach property labels to a dataset.
    Label {
        #[arg(long)]
        data: PathBuf,
        /// Property spec (JSON).
        #[arg(long)]
        property: PathBuf,
        /// Use the endpoint as a classifier instead of keyword rules.
        #[arg(long)]
        classifier: bool,
    },
    /// Draw a dataset with an exact property ratio.
    Subsample {
        #[arg(long)]
        data: PathBuf,
        /// Property name.
        #[arg(long)]
        property: String,
        #[arg(long)]
        ratio: f64,
        #[arg(long)]
        size: usize,
        #[arg(long)]
        with_replacement: bool,
    },
    /// Synthetic lab models.
    #[command(subcommand)]
    Lab(LabCommand),
    /// Run an attack against the endpoint.
    #[command(subcommand)]
    Attack(AttackCommand),
    /// Ask the endpoint for the ratio directly.
    Ask {
        /// Property phrase, e.g. "female patient".
        #[arg(long)]
        phrase: String,
        #[arg(long)]
        template: Option<String>,
        #[arg(long)]
        truth: Option<f64>,
    },
    #[command(subcommand)]
    Experiment(ExperimentCommand),
    /// Sweep one parameter of an experiment.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// keywords_d, shadow_count or gen_count.
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
    },
}

#[derive(Subcommand)]
enum LabCommand {
    /// Write an endpoint handle for a synthetic model.
    Build(LabArgs),
    /// Draw labeled records from a synthetic model's data distribution.
    Records {
        #[command(flatten)]
        lab: LabArgs,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value = "gender")]
        property: String,
    },
    /// Print the property spec matching the lab's signal words.
    Property {
        #[command(flatten)]
        lab: LabArgs,
        #[arg(long, default_value = "gender")]
        name: String,
    },
}

#[derive(Args)]
struct LabArgs {
    /// Generator config (JSON); overrides the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    ratio: f64,
    #[arg(long, default_value = "cc")]
    mode: String,
    #[arg(long, default_value_t = 0.5)]
    boost: f64,
    #[arg(long, default_value_t = DEFAULT_SAMPLE_LEN)]
    sample_len: usize,
    /// Drop the output-side signal words.
    #[arg(long)]
    input_only: bool,
}

#[derive(Args)]
struct ShadowArgs {
    /// Auxiliary labeled dataset (JSONL).
    #[arg(long)]
    aux: PathBuf,
    /// Property spec (JSON).
    #[arg(long)]
    property: PathBuf,
    #[arg(long, value_delimiter = ',')]
    ratios: Option<Vec<f64>>,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 500)]
    size: usize,
    /// GBT parameters (JSON).
    #[arg(long)]
    gbt: Option<PathBuf>,
    /// Fine-tuning command for shadow models; the lab is used when absent.
    #[arg(long)]
    factory_cmd: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    factory_arg: Vec<String>,
    #[arg(long, default_value = "shadow_work")]
    work_dir: PathBuf,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    truth: Option<f64>,
    /// Write the fitted meta-regressor here (JSON).
    #[arg(long)]
    model_out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum AttackCommand {
    /// Black-box generation attack.
    Generate {
        #[arg(long)]
        property: PathBuf,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        /// Prompt set (JSON).
        #[arg(long)]
        prompts: Option<PathBuf>,
        #[arg(long)]
        weighted: bool,
        /// Label with the endpoint at this URL instead of keywords.
        #[arg(long)]
        classifier_url: Option<String>,
        #[arg(long)]
        truth: Option<f64>,
    },
    /// Shadow-model attack on word-containment frequencies.
    ShadowWordfreq {
        #[command(flatten)]
        shadow: ShadowArgs,
        #[arg(long, default_value_t = 2000)]
        n_gen: usize,
        #[arg(short = 'd', long, default_value_t = 10)]
        keywords: usize,
        #[arg(long)]
        prompts: Option<PathBuf>,
        /// Write the shadow frequency matrix here (CSV).
        #[arg(long)]
        matrix_out: Option<PathBuf>,
    },
    /// Shadow-model attack on holdout perplexities.
    ShadowPerplexity {
        #[command(flatten)]
        shadow: ShadowArgs,
        /// All-negative holdout (JSONL).
        #[arg(long)]
        s0: PathBuf,
        /// All-positive holdout (JSONL).
        #[arg(long)]
        s1: PathBuf,
    },
}

#[derive(Subcommand)]
enum ExperimentCommand {
    /// Run a full grid from a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    let exec = match g.threads {
        Some(n) => Parallel::with_threads(n),
        None => Parallel::new(),
    };
    match &cli.command {
        Command::Label {
            data,
            property,
            classifier,
        } => {
            let spec = load_property(property)?;
            let mut ds = load_jsonl(data)?;
            let target = if *classifier { Some(open_endpoint(g)?) } else { None };
            let labeler: Box<dyn Labeler> = match &target {
                Some(m) => Box::new(ClassifierLabeler {
                    spec: &spec,
                    model: m,
                    seed: g.seed,
                }),
                None => Box::new(KeywordLabeler::new(&spec)),
            };
            for s in &mut ds.samples {
                let v = label_sample(s, &spec, &*labeler)?;
                s.labels.insert(spec.name.clone(), v);
            }
            match true_ratio(&ds, &spec.name) {
                Ok(r) => eprintln!("{}: ratio {r:.4} over {} samples", spec.name, ds.len()),
                Err(e) => eprintln!("{}: {e}", spec.name),
            }
            emit_dataset(&ds, g.out.as_deref())
        }
        Command::Subsample {
            data,
            property,
            ratio,
            size,
            with_replacement,
        } => {
            let ds = load_jsonl(data)?;
            let sub = subsample_to_ratio_with(&ds, property, *ratio, *size, g.seed, *with_replacement)?;
            eprintln!("{property}: achieved ratio {}", true_ratio(&sub, property)?);
            emit_dataset(&sub, g.out.as_deref())
        }
        Command::Lab(cmd) => lab(cmd, g),
        Command::Attack(cmd) => attack(cmd, g, &exec),
        Command::Ask {
            phrase,
            template,
            truth,
        } => {
            let target = open_endpoint(g)?;
            let template = template
                .clone()
                .unwrap_or_else(|| direct_ask_template(phrase, "The ratio is "));
            let v = direct_ask(&target, phrase, &template, g.seed)?;
            let mut report = AttackReport::new(propinfer_core::AttackKind::DirectAsk, phrase, v);
            if let Some(t) = truth {
                report = report.with_ground_truth(*t)?;
            }
            show_report(&report);
            emit(&to_canonical_json(&report)?, g.out.as_deref())
        }
        Command::Experiment(ExperimentCommand::Run { config }) => {
            let cfg: ExperimentConfig = load(config)?;
            let outcome = run_experiment(&cfg, &exec)?;
            eprintln!("{:<18} {:<10} {:>5} {:>6} {:>18}", "attack", "target", "runs", "failed", "MAE x100 (mean±sd)");
            for s in &outcome.summary {
                let mae = match (s.mean_mae, s.sd_mae) {
                    (Some(m), Some(sd)) => format!("{:.2} ± {:.2}", m * 100.0, sd * 100.0),
                    _ => "-".into(),
                };
                eprintln!("{:<18} {:<10} {:>5} {:>6} {:>18}", s.attack.as_str(), s.target, s.runs, s.failed, mae);
            }
            for c in outcome.cells.iter().filter(|c| c.error.is_some()) {
                eprintln!(
                    "failed: {} target {} repeat {}: {}",
                    c.attack.as_str(),
                    c.target,
                    c.repeat_index,
                    c.error.as_deref().unwrap_or_default()
                );
            }
            match g.out.clone().or(cfg.output_dir.clone()) {
                Some(dir) => {
                    write_outcome(&outcome, &dir)?;
                    eprintln!("wrote {}", dir.display());
                    Ok(())
                }
                None => emit(&to_canonical_json(&outcome)?, None),
            }
        }
        Command::Ablate { config, axis, values } => {
            let cfg: ExperimentConfig = load(config)?;
            let axis: AblationAxis = axis.parse()?;
            let points = ablation_sweep(&cfg, axis, values, &exec)?;
            for p in &points {
                eprintln!(
                    "{axis}={:<6} MAE x100 {}",
                    p.value,
                    match (p.mean_mae, p.sd_mae) {
                        (Some(m), Some(sd)) => format!("{:.2} ± {:.2}", m * 100.0, sd * 100.0),
                        _ => "-".into(),
                    }
                );
            }
            let text = match g.format.parse::<ReportFormat>()? {
                ReportFormat::Json => to_canonical_json(&points)?,
                ReportFormat::Csv => {
                    let mut s = format!("{axis},runs,failed,mean_mae,sd_mae\n");
                    for p in &points {
                        let f = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
                        s += &format!("{},{},{},{},{}\n", p.value, p.runs, p.failed, f(p.mean_mae), f(p.sd_mae));
                    }
                    s
                }
            };
            emit(&text, g.out.as_deref())
        }
    }
}

fn lab_config(a: &LabArgs, seed: u64) -> Result<SyntheticConfig> {
    if let Some(path) = &a.config {
        return load(path);
    }
    let mode = FineTuneMode::parse(&a.mode).ok_or_else(|| anyhow!("unknown mode `{}` (qa or cc)", a.mode))?;
    let vocab = if a.input_only {
        VocabSpec::lab_input_only()
    } else {
        VocabSpec::lab_default()
    };
    let cfg = SyntheticConfig {
        ratio: a.ratio,
        mode,
        vocab: vocab.with_boost(a.boost),
        sample_len: a.sample_len,
        seed,
    };
    SyntheticModel::from_config(cfg.clone())?;
    Ok(cfg)
}

fn lab(cmd: &LabCommand, g: &Global) -> Result<()> {
    match cmd {
        LabCommand::Build(a) => {
            let cfg = lab_config(a, g.seed)?;
            emit(&to_canonical_json(&EndpointSpec::Synthetic(cfg))?, g.out.as_deref())
        }
        LabCommand::Records { lab, n, property } => {
            let model = SyntheticModel::from_config(lab_config(lab, g.seed)?)?;
            emit_dataset(&model.draw_records(*n, g.seed, property), g.out.as_deref())
        }
        LabCommand::Property { lab, name } => {
            let cfg = lab_config(lab, g.seed)?;
            let spec = propinfer::experiment::lab_property(&cfg.vocab, name);
            emit(&to_canonical_json(&spec)?, g.out.as_deref())
        }
    }
}

fn attack(cmd: &AttackCommand, g: &Global, exec: &Parallel) -> Result<()> {
    let target = open_endpoint(g)?;
    match cmd {
        AttackCommand::Generate {
            property,
            n,
            prompts,
            weighted,
            classifier_url,
            truth,
        } => {
            let spec = load_property(property)?;
            let prompts = load_prompts(prompts.as_deref())?;
            let how = if *weighted {
                Aggregation::ValidWeighted
            } else {
                Aggregation::Unweighted
            };
            let classifier = classifier_url
                .as_ref()
                .map(|url| remote_endpoint(g, url))
                .transpose()?;
            let labeler: Box<dyn Labeler> = match &classifier {
                Some(m) => Box::new(ClassifierLabeler {
                    spec: &spec,
                    model: m,
                    seed: g.seed,
                }),
                None => Box::new(KeywordLabeler::new(&spec)),
            };
            let est = run_generation_attack(&target, &prompts, *n, &*labeler, g.seed, how)?;
            for p in &est.per_prompt {
                eprintln!("rhat {:.4}  valid {:>5}  na {:>5}  {}", p.rhat, p.valid, p.na, p.prompt.replace('\n', " "));
            }
            let report = GenerationReport::new(&spec.name, est, g.seed, target.model_id());
            let mut shown = AttackReport::new(propinfer_core::AttackKind::Generation, &spec.name, report.estimate);
            if let Some(t) = truth {
                shown = shown.with_ground_truth(*t)?;
            }
            show_report(&shown);
            emit(&to_canonical_json(&report)?, g.out.as_deref())
        }
        AttackCommand::ShadowWordfreq {
            shadow,
            n_gen,
            keywords,
            prompts,
            matrix_out,
        } => {
            let (spec, plan, sets, factory, gbt) = shadow_setup(shadow, &target, g)?;
            let cfg = WordFreqConfig {
                prompts: load_prompts(prompts.as_deref())?,
                n_gen: *n_gen,
                d_keywords: *keywords,
                gbt,
                kind: Default::default(),
                seed: g.seed,
            };
            let out = run_wordfreq_shadow_attack(&plan, &sets, &factory, &target, &cfg, exec)?;
            if let Some(path) = matrix_out {
                save_matrix_csv(&out.matrix, path)?;
            }
            if let Some(path) = &shadow.model_out {
                save_json(&out.meta, path)?;
            }
            eprintln!("keywords: {}", out.selection.keywords.join(", "));
            finish_shadow(out.report, shadow.truth, &spec, g)
        }
        AttackCommand::ShadowPerplexity { shadow, s0, s1 } => {
            let (spec, plan, sets, factory, gbt) = shadow_setup(shadow, &target, g)?;
            let s0 = load_jsonl(s0)?;
            let s1 = load_jsonl(s1)?;
            let out = run_perplexity_shadow_attack(&plan, &sets, &factory, &target, &s0, &s1, &gbt, g.seed, exec)?;
            if let Some(path) = &shadow.model_out {
                save_json(&out.meta, path)?;
            }
            finish_shadow(out.report, shadow.truth, &spec, g)
        }
    }
}

type ShadowSetup = (
    PropertySpec,
    propinfer_core::shadow::ShadowPlan,
    Vec<propinfer_core::shadow::ShadowDataset>,
    AnyFactory,
    GbtParams,
);

fn shadow_setup(a: &ShadowArgs, target: &ModelEndpoint, g: &Global) -> Result<ShadowSetup> {
    let spec = load_property(&a.property)?;
    let aux = load_jsonl(&a.aux)?;
    let ratios = a.ratios.clone().unwrap_or_else(|| ratio_grid(0.2, 0.8, 7));
    let (plan, sets) = build_shadow_plan(&aux, &spec.name, &ratios, a.repeats, a.size, g.seed)?;
    let gbt: GbtParams = match &a.gbt {
        Some(p) => load(p)?,
        None => GbtParams::default(),
    };
    let factory = match (&a.factory_cmd, target) {
        (Some(cmd), _) => {
            let mode = a.mode.as_deref().unwrap_or("cc");
            AnyFactory::External(ExternalFactory {
                program: cmd.clone(),
                args: a.factory_arg.clone(),
                mode: FineTuneMode::parse(mode).ok_or_else(|| anyhow!("unknown mode `{mode}`"))?,
                work_dir: a.work_dir.clone(),
                remote: remote_spec(g, ""),
            })
        }
        (None, ModelEndpoint::Synthetic(m)) => AnyFactory::Synthetic(SyntheticFactory {
            property: spec.name.clone(),
            mode: m.mode(),
            vocab: m.vocab().clone(),
            sample_len: m.config().sample_len,
        }),
        (None, ModelEndpoint::Remote(_)) => bail!("a remote target needs --factory-cmd to build shadow models"),
    };
    Ok((spec, plan, sets, factory, gbt))
}

fn finish_shadow(mut report: AttackReport, truth: Option<f64>, _spec: &PropertySpec, g: &Global) -> Result<()> {
    if let Some(t) = truth {
        report = report.with_ground_truth(t)?;
    }
    show_report(&report);
    emit(&to_canonical_json(&report)?, g.out.as_deref())
}

fn show_report(r: &AttackReport) {
    let mut line = format!("{} {}: prediction {:.4}", r.attack_kind.as_str(), r.property, r.prediction);
    if let (Some(t), Some(m)) = (r.ground_truth, r.mae) {
        line += &format!("  truth {t:.4}  MAE x100 {:.2}", m * 100.0);
    }
    for f in &r.flags {
        line += &format!("  [{f}]");
    }
    eprintln!("{line}");
}

fn remote_spec(g: &Global, url: &str) -> RemoteSpec {
    RemoteSpec {
        decode: DecodeParams {
            max_tokens: g.max_tokens,
            temperature: g.temperature,
            stop_sequences: Vec::new(),
        },
        ..RemoteSpec::new(url, &g.model)
    }
}

fn remote_endpoint(g: &Global, url: &str) -> Result<ModelEndpoint> {
    Ok(EndpointSpec::Remote(remote_spec(g, url)).open()?)
}

fn open_endpoint(g: &Global) -> Result<ModelEndpoint> {
    match (&g.endpoint, &g.endpoint_url) {
        (Some(path), _) => {
            let spec: EndpointSpec = load(path)?;
            Ok(spec.open()?)
        }
        (None, Some(url)) => remote_endpoint(g, url),
        (None, None) => bail!("no target: pass --endpoint <handle file> or --endpoint-url <url>"),
    }
}

fn load<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    propinfer::formats::load_json(path).with_context(|| format!("reading {}", path.display()))
}

fn load_property(path: &Path) -> Result<PropertySpec> {
    let spec: PropertySpec = load(path)?;
    spec.validate()?;
    Ok(spec)
}

fn load_prompts(path: Option<&Path>) -> Result<PromptSet> {
    let set = match path {
        Some(p) => load(p)?,
        None => PromptSet::default(),
    };
    set.validate()?;
    Ok(set)
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut o = std::io::stdout().lock();
            o.write_all(text.as_bytes())?;
            Ok(o.flush()?)
        }
    }
}

fn emit_dataset(ds: &LabeledDataset, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => Ok(save_jsonl(ds, p)?),
        None => Ok(write_jsonl(ds, std::io::stdout().lock())?),
    }
}
