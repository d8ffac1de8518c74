//! JSON Lines datasets.
//!
//! One object per line with string fields `instruction`, `input` and `output`
//! and an optional `labels` object mapping property names to `0`, `1` or
//! `"na"`. Top-level keys of the form `label_<name>` are folded into the
//! labels as well; any other key is ignored. Blank lines are skipped.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use propinfer_core::{LabelValue, LabeledDataset, Sample};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// Top-level key prefix that marks a label column.
pub const LABEL_PREFIX: &str = "label_";

pub fn load_jsonl(path: &Path) -> Result<LabeledDataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_jsonl(BufReader::new(file), &path.display().to_string())
        .map_err(|e| match e {
            Error::Io { source, .. } => Error::io(path, source),
            e => e,
        })
}

pub fn read_jsonl<R: BufRead>(reader: R, source: &str) -> Result<LabeledDataset> {
    let mut samples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(source, e))?;
        if line.trim().is_empty() {
            continue;
        }
        samples.push(parse_line(&line, i + 1)?);
    }
    Ok(LabeledDataset::new(samples, source))
}

fn parse_line(line: &str, line_no: usize) -> Result<Sample> {
    let malformed = |message: String| Error::MalformedLine {
        line: line_no,
        message,
    };
    let obj: Map<String, Value> = match serde_json::from_str(line) {
        Ok(Value::Object(m)) => m,
        Ok(_) => return Err(malformed("not a JSON object".into())),
        Err(e) => return Err(malformed(e.to_string())),
    };
    let text = |field: &'static str, required: bool| -> Result<String> {
        match obj.get(field) {
            Some(Value::String(s)) => Ok(s.clone()),
            Some(_) => Err(malformed(format!("`{field}` is not a string"))),
            None if required => Err(Error::MissingField { line: line_no, field }),
            None => Ok(String::new()),
        }
    };
    let mut sample = Sample {
        instruction: text("instruction", false)?,
        input: text("input", true)?,
        output: text("output", true)?,
        ..Sample::default()
    };
    let label = |name: &str, v: &Value| -> Result<LabelValue> {
        serde_json::from_value(v.clone()).map_err(|e| malformed(format!("label `{name}`: {e}")))
    };
    if let Some(labels) = obj.get("labels") {
        let Value::Object(labels) = labels else {
            return Err(malformed("`labels` is not an object".into()));
        };
        for (name, v) in labels {
            sample.labels.insert(name.clone(), label(name, v)?);
        }
    }
    for (key, v) in &obj {
        if let Some(name) = key.strip_prefix(LABEL_PREFIX) {
            if !name.is_empty() {
                sample.labels.insert(name.to_string(), label(name, v)?);
            }
        }
    }
    Ok(sample)
}

pub fn write_jsonl<W: Write>(dataset: &LabeledDataset, mut out: W) -> std::io::Result<()> {
    for s in &dataset.samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn save_jsonl(dataset: &LabeledDataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_jsonl(dataset, BufWriter::new(file)).map_err(|e| Error::io(path, e))
}
