//! On-disk formats: frequency-matrix CSV, JSON documents and the generation
//! attack report.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use propinfer_core::features::{format_sig9, FrequencyMatrix, Vocabulary};
use propinfer_core::gen_attack::{PromptEstimate, RatioEstimate};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Header cell above the row labels.
pub const MODEL_ID_COLUMN: &str = "model_id";

/// Header: `model_id` then the vocabulary; cells carry 9 significant digits.
pub fn write_matrix_csv<W: Write>(matrix: &FrequencyMatrix, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(std::iter::once(MODEL_ID_COLUMN).chain(matrix.vocab.words().iter().map(String::as_str)))?;
    for (id, row) in matrix.model_ids.iter().zip(&matrix.values) {
        w.write_record(std::iter::once(id.clone()).chain(row.iter().map(|&v| format_sig9(v))))?;
    }
    w.flush().map_err(|e| Error::Csv(e.to_string()))
}

pub fn read_matrix_csv<R: Read>(input: R) -> Result<FrequencyMatrix> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    if header.get(0) != Some(MODEL_ID_COLUMN) {
        return Err(Error::Csv(format!("first header cell must be `{MODEL_ID_COLUMN}`")));
    }
    let words: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let vocab = Vocabulary::from_words(words.iter().cloned());
    if vocab.words() != words.as_slice() {
        return Err(Error::Csv("vocabulary columns must be sorted, unique and lowercase".into()));
    }
    let mut ids = Vec::new();
    let mut values = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        ids.push(rec.get(0).unwrap_or_default().to_string());
        let row = rec
            .iter()
            .skip(1)
            .map(|c| c.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Csv(format!("row {}: {e}", i + 1)))?;
        values.push(row);
    }
    Ok(FrequencyMatrix::new(ids, vocab, values)?)
}

pub fn save_matrix_csv(matrix: &FrequencyMatrix, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_matrix_csv(matrix, BufWriter::new(f))
}

pub fn load_matrix_csv(path: &Path) -> Result<FrequencyMatrix> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_matrix_csv(BufReader::new(f))
}

/// Pretty JSON with keys in sorted order, so parse then re-emit is
/// byte-identical.
pub fn to_canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

pub fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = to_canonical_json(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_reader(BufReader::new(f))?)
}

/// Output of the black-box generation attack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub property: String,
    pub estimate: f64,
    pub per_prompt: Vec<PromptEstimate>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub excluded_prompts: Vec<String>,
    pub n_total: usize,
    pub seed: u64,
    pub endpoint_id: String,
}

impl GenerationReport {
    pub fn new(property: &str, est: RatioEstimate, seed: u64, endpoint_id: String) -> GenerationReport {
        GenerationReport {
            property: property.to_string(),
            estimate: est.value,
            per_prompt: est.per_prompt,
            excluded_prompts: est.excluded_prompts,
            n_total: est.n_total,
            seed,
            endpoint_id,
        }
    }
}
