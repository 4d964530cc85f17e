//! Interchange formats.
//!
//! - annotations: JSONL, one [`AnnotationRecord`] per line
//! - predictions / ground truth: JSONL, one [`PredictionRecord`] per line,
//!   `label` is `null` for abstentions
//! - weights: a single JSON document, [`WeightsReport`]
//! - schema: a single JSON document, [`SchemaFile`]
//!
//! All readers reject unknown or missing fields.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::aggregate::EnsembleState;
use crate::error::{Error, Result};
use crate::label::{AnnotationMatrix, AnnotationRecord, AttributeSchema, ExtendedLabel};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub item_id: String,
    pub attribute: String,
    pub label: Option<String>,
}

/// Learned weights and accuracies keyed by annotator id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsReport {
    pub attribute: String,
    pub weights: BTreeMap<String, f64>,
    pub accuracies: BTreeMap<String, f64>,
    pub iterations_run: usize,
    pub converged: bool,
}

impl WeightsReport {
    pub fn from_state(matrix: &AnnotationMatrix, state: &EnsembleState) -> Self {
        let ids = matrix.annotator_ids();
        WeightsReport {
            attribute: matrix.schema().name().to_string(),
            weights: ids
                .iter()
                .cloned()
                .zip(state.weights.iter().copied())
                .collect(),
            accuracies: ids
                .iter()
                .cloned()
                .zip(state.accuracies.iter().copied())
                .collect(),
            iterations_run: state.iterations_run,
            converged: state.converged,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.weights.keys().eq(self.accuracies.keys()) {
            return Err(Error::input(
                "weights and accuracies must cover the same annotators",
            ));
        }
        if let Some((id, a)) = self
            .accuracies
            .iter()
            .find(|(_, a)| !(0.0..=1.0).contains(*a))
        {
            return Err(Error::input(format!(
                "accuracy {a} of `{id}` outside [0, 1]"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemaFile {
    pub attribute: String,
    pub labels: Vec<String>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

/// Reads a JSONL file; every non-final line must hold one value.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let reader = open(path)?;
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(value);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, values: &[T]) -> Result<()> {
    let mut w = create(path)?;
    for value in values {
        serde_json::to_writer(&mut w, value).map_err(|e| Error::io(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_reader(open(path)?).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::io(path, e.into()))?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let records: Vec<AnnotationRecord> = read_jsonl(path)?;
    for (idx, r) in records.iter().enumerate() {
        r.validate().map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
    }
    Ok(records)
}

pub fn write_annotations(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    write_jsonl(path, records)
}

/// Prediction records for `item_ids`, labels decoded to canonical names.
pub fn prediction_records(
    item_ids: &[String],
    predictions: &[ExtendedLabel],
    schema: &AttributeSchema,
) -> Result<Vec<PredictionRecord>> {
    if item_ids.len() != predictions.len() {
        return Err(Error::input(format!(
            "{} item ids for {} predictions",
            item_ids.len(),
            predictions.len()
        )));
    }
    item_ids
        .iter()
        .zip(predictions)
        .map(|(id, &p)| {
            let label = match p {
                ExtendedLabel::MISSING => None,
                _ => Some(
                    schema
                        .decode(p)
                        .ok_or_else(|| Error::input(format!("label {p} outside the schema")))?
                        .to_string(),
                ),
            };
            Ok(PredictionRecord {
                item_id: id.clone(),
                attribute: schema.name().to_string(),
                label,
            })
        })
        .collect()
}

pub fn write_predictions(
    path: &Path,
    item_ids: &[String],
    predictions: &[ExtendedLabel],
    schema: &AttributeSchema,
) -> Result<()> {
    write_jsonl(path, &prediction_records(item_ids, predictions, schema)?)
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    read_jsonl(path)
}

pub fn write_weights(path: &Path, report: &WeightsReport) -> Result<()> {
    report.validate()?;
    if let Some((id, w)) = report.weights.iter().find(|(_, w)| !w.is_finite()) {
        return Err(Error::input(format!("weight {w} of `{id}` is not finite")));
    }
    write_json(path, report)
}

pub fn read_weights(path: &Path) -> Result<WeightsReport> {
    let report: WeightsReport = read_json(path)?;
    report.validate().map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })?;
    Ok(report)
}

pub fn read_schema(path: &Path) -> Result<AttributeSchema> {
    let file: SchemaFile = read_json(path)?;
    AttributeSchema::new(file.attribute, file.labels)
}

pub fn write_schema(path: &Path, schema: &AttributeSchema) -> Result<()> {
    write_json(
        path,
        &SchemaFile {
            attribute: schema.name().to_string(),
            labels: schema.labels().to_vec(),
        },
    )
}

/// Dense CSV dump of `W` (annotators as rows, items as columns, 0 = missing).
/// Meant for eyeballing small matrices.
pub fn write_dense_csv(path: &Path, matrix: &AnnotationMatrix) -> Result<()> {
    let mut w = create(path)?;
    let mut emit = |line: String| w.write_all(line.as_bytes()).map_err(|e| Error::io(path, e));
    let mut header = String::from("annotator");
    for id in matrix.item_ids() {
        header.push(',');
        header.push_str(&csv_field(id));
    }
    header.push('\n');
    emit(header)?;
    for (id, row) in matrix.annotator_ids().iter().zip(matrix.to_dense()) {
        let mut line = csv_field(id);
        for v in row {
            line.push(',');
            line.push_str(&v.to_string());
        }
        line.push('\n');
        emit(line)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
