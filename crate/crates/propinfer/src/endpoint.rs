//! Model endpoints, endpoint handle files and shadow-model factories.

use std::path::{Path, PathBuf};
use std::process::Command;

use propinfer_core::shadow::{ModelFactory, ShadowDataset, SyntheticFactory};
use propinfer_core::synth::SyntheticConfig;
use propinfer_core::{Error as CoreError, FineTuneMode, GenerationSet, Result, SyntheticModel, TextModel};
use serde::{Deserialize, Serialize};

use crate::jsonl::save_jsonl;
use crate::remote::{RemoteModel, RemoteSpec};

/// What an endpoint handle file holds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EndpointSpec {
    Remote(RemoteSpec),
    Synthetic(SyntheticConfig),
}

impl EndpointSpec {
    pub fn open(&self) -> Result<ModelEndpoint> {
        Ok(match self {
            EndpointSpec::Remote(spec) => ModelEndpoint::Remote(RemoteModel::new(spec.clone())?),
            EndpointSpec::Synthetic(cfg) => ModelEndpoint::Synthetic(SyntheticModel::from_config(cfg.clone())?),
        })
    }
}

pub enum ModelEndpoint {
    Remote(RemoteModel),
    Synthetic(SyntheticModel),
}

impl ModelEndpoint {
    pub fn spec(&self) -> EndpointSpec {
        match self {
            ModelEndpoint::Remote(m) => EndpointSpec::Remote(m.spec().clone()),
            ModelEndpoint::Synthetic(m) => EndpointSpec::Synthetic(m.config().clone()),
        }
    }
}

impl TextModel for ModelEndpoint {
    fn model_id(&self) -> String {
        match self {
            ModelEndpoint::Remote(m) => m.model_id(),
            ModelEndpoint::Synthetic(m) => m.model_id(),
        }
    }

    fn generate_batch(&self, prompt: &str, n: usize, seed: u64) -> Result<GenerationSet> {
        match self {
            ModelEndpoint::Remote(m) => m.generate_batch(prompt, n, seed),
            ModelEndpoint::Synthetic(m) => m.generate_batch(prompt, n, seed),
        }
    }

    fn score_logprobs(&self, text: &str) -> Result<Vec<f64>> {
        match self {
            ModelEndpoint::Remote(m) => m.score_logprobs(text),
            ModelEndpoint::Synthetic(m) => m.score_logprobs(text),
        }
    }
}

/// Hands each shadow dataset to a user command that fine-tunes a model and
/// prints the base URL it is served at:
/// `<program> <args..> --dataset <path> --mode <qa|cc>`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExternalFactory {
    pub program: String,
    #[serde(default)]
    pub args: Vec<String>,
    pub mode: FineTuneMode,
    /// Where shadow datasets are written.
    pub work_dir: PathBuf,
    /// Template for the returned endpoints; its `url` is replaced.
    pub remote: RemoteSpec,
}

impl ExternalFactory {
    fn dataset_path(&self, shadow: &ShadowDataset) -> PathBuf {
        self.work_dir
            .join(format!("shadow_{}_{}.jsonl", shadow.ratio_index, shadow.repeat_index))
    }

    /// Runs the command for one dataset file and returns the printed URL.
    pub fn invoke(&self, dataset: &Path) -> Result<String> {
        let out = Command::new(&self.program)
            .args(&self.args)
            .arg("--dataset")
            .arg(dataset)
            .arg("--mode")
            .arg(self.mode.as_str())
            .output()
            .map_err(|e| CoreError::ShadowBuildFailed(format!("cannot run `{}`: {e}", self.program)))?;
        if !out.status.success() {
            return Err(CoreError::ShadowBuildFailed(format!(
                "`{}` exited with {}: {}",
                self.program,
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        String::from_utf8_lossy(&out.stdout)
            .lines()
            .map(str::trim)
            .rfind(|l| !l.is_empty())
            .map(str::to_string)
            .ok_or_else(|| CoreError::ShadowBuildFailed(format!("`{}` printed no endpoint url", self.program)))
    }
}

impl ModelFactory for ExternalFactory {
    type Model = ModelEndpoint;

    fn build(&self, shadow: &ShadowDataset, _seed: u64) -> Result<ModelEndpoint> {
        std::fs::create_dir_all(&self.work_dir)
            .map_err(|e| CoreError::ShadowBuildFailed(format!("{}: {e}", self.work_dir.display())))?;
        let path = self.dataset_path(shadow);
        save_jsonl(&shadow.dataset, &path).map_err(|e| CoreError::ShadowBuildFailed(e.to_string()))?;
        let url = self.invoke(&path)?;
        let spec = RemoteSpec {
            url,
            ..self.remote.clone()
        };
        Ok(ModelEndpoint::Remote(RemoteModel::new(spec)?))
    }
}

/// Either factory behind one type, so harness code is not generic over it.
pub enum AnyFactory {
    Synthetic(SyntheticFactory),
    External(ExternalFactory),
}

impl ModelFactory for AnyFactory {
    type Model = ModelEndpoint;

    fn build(&self, shadow: &ShadowDataset, seed: u64) -> Result<ModelEndpoint> {
        match self {
            AnyFactory::Synthetic(f) => f.build(shadow, seed).map(ModelEndpoint::Synthetic),
            AnyFactory::External(f) => f.build(shadow, seed),
        }
    }
}
