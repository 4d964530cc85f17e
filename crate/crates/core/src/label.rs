//! Attributes, label sets and the sparse annotation matrix.
//!
//! Labels are encoded as `1..=L` in schema order; `0` is the missing
//! sentinel and is never stored in an [`AnnotationMatrix`].

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Normalization applied to every raw label before lookup.
pub fn normalize(raw: &str) -> String {
    raw.trim().to_lowercase()
}

/// An attribute together with its closed set of permitted values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeSchema {
    name: String,
    labels: Vec<String>,
    keys: Vec<String>,
}

impl AttributeSchema {
    pub fn new<S: Into<String>>(
        name: impl Into<String>,
        labels: impl IntoIterator<Item = S>,
    ) -> Result<Self> {
        let name = name.into().trim().to_string();
        if name.is_empty() {
            return Err(Error::input("attribute name is empty"));
        }
        let labels: Vec<String> = labels
            .into_iter()
            .map(|l| l.into().trim().to_string())
            .collect();
        if labels.len() < 2 {
            return Err(Error::input(format!(
                "attribute `{name}` needs at least 2 labels, got {}",
                labels.len()
            )));
        }
        let mut keys = Vec::with_capacity(labels.len());
        for label in &labels {
            if label.is_empty() {
                return Err(Error::input(format!(
                    "attribute `{name}` has an empty label"
                )));
            }
            let key = normalize(label);
            if keys.contains(&key) {
                return Err(Error::input(format!(
                    "attribute `{name}` has duplicate label `{label}`"
                )));
            }
            keys.push(key);
        }
        Ok(AttributeSchema { name, labels, keys })
    }

    /// Parses a comma separated label list such as `male,female,unisex`.
    pub fn from_csv_labels(name: impl Into<String>, labels: &str) -> Result<Self> {
        Self::new(name, labels.split(','))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Number of real classes `L`, excluding the missing sentinel.
    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    /// Canonical name of an encoded label, `None` for missing or out of range.
    pub fn decode(&self, label: ExtendedLabel) -> Option<&str> {
        match label.0 {
            0 => None,
            k => self.labels.get(k as usize - 1).map(String::as_str),
        }
    }

    fn lookup(&self, key: &str) -> ExtendedLabel {
        self.keys
            .iter()
            .position(|k| k == key)
            .map(|idx| ExtendedLabel(idx as u32 + 1))
            .unwrap_or(ExtendedLabel::MISSING)
    }
}

/// A label from the extended set: `0` is missing, `1..=L` a real class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct ExtendedLabel(pub u32);

impl ExtendedLabel {
    pub const MISSING: ExtendedLabel = ExtendedLabel(0);

    pub fn is_missing(self) -> bool {
        self.0 == 0
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ExtendedLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// One raw annotation: annotator `annotator_id` said `raw_label` about
/// `attribute` of `item_id`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub annotator_id: String,
    pub item_id: String,
    pub attribute: String,
    pub raw_label: String,
}

impl AnnotationRecord {
    pub fn new(
        annotator_id: impl Into<String>,
        item_id: impl Into<String>,
        attribute: impl Into<String>,
        raw_label: impl Into<String>,
    ) -> Self {
        AnnotationRecord {
            annotator_id: annotator_id.into(),
            item_id: item_id.into(),
            attribute: attribute.into(),
            raw_label: raw_label.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("annotator_id", &self.annotator_id),
            ("item_id", &self.item_id),
            ("attribute", &self.attribute),
            ("raw_label", &self.raw_label),
        ];
        for (field, value) in fields {
            if value.is_empty() {
                return Err(Error::input(format!("annotation field `{field}` is empty")));
            }
        }
        Ok(())
    }
}

/// Encodes a raw label into `1..=L`, or missing when it is not in the label set.
pub fn encode_label(schema: &AttributeSchema, raw: &str) -> ExtendedLabel {
    schema.lookup(&normalize(raw))
}

/// Sparse `N x P` matrix of extended labels.
///
/// Only observed cells are stored; the observation indicator `T` is implied by
/// presence. Entries are indexed both by item (for voting) and by annotator
/// (for accuracy estimation), each sorted by the other index.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationMatrix {
    schema: AttributeSchema,
    annotator_ids: Vec<String>,
    item_ids: Vec<String>,
    by_item: Vec<Vec<(usize, ExtendedLabel)>>,
    by_annotator: Vec<Vec<(usize, ExtendedLabel)>>,
}

impl AnnotationMatrix {
    /// Builds a matrix from `(annotator, item, label)` triples. Missing labels
    /// are skipped; repeating a cell with the same label is allowed.
    pub fn from_entries(
        schema: AttributeSchema,
        annotator_ids: Vec<String>,
        item_ids: Vec<String>,
        entries: impl IntoIterator<Item = (usize, usize, ExtendedLabel)>,
    ) -> Result<Self> {
        check_unique("annotator", &annotator_ids)?;
        check_unique("item", &item_ids)?;
        let n = annotator_ids.len();
        let p = item_ids.len();
        let l = schema.num_labels() as u32;
        let mut cells: HashMap<(usize, usize), ExtendedLabel> = HashMap::new();
        for (i, j, label) in entries {
            if i >= n || j >= p {
                return Err(Error::input(format!(
                    "entry ({i}, {j}) outside a {n} x {p} matrix"
                )));
            }
            if label.0 > l {
                return Err(Error::input(format!(
                    "label {label} outside 0..={l} for attribute `{}`",
                    schema.name()
                )));
            }
            if label.is_missing() {
                continue;
            }
            match cells.insert((i, j), label) {
                Some(prev) if prev != label => {
                    return Err(Error::Conflict {
                        annotator_id: annotator_ids[i].clone(),
                        item_id: item_ids[j].clone(),
                        first: schema.decode(prev).unwrap_or_default().to_string(),
                        second: schema.decode(label).unwrap_or_default().to_string(),
                    })
                }
                _ => {}
            }
        }
        let mut by_item = vec![Vec::new(); p];
        let mut by_annotator = vec![Vec::new(); n];
        for (&(i, j), &label) in &cells {
            by_item[j].push((i, label));
            by_annotator[i].push((j, label));
        }
        by_item.iter_mut().for_each(|v| v.sort_unstable());
        by_annotator.iter_mut().for_each(|v| v.sort_unstable());
        Ok(AnnotationMatrix {
            schema,
            annotator_ids,
            item_ids,
            by_item,
            by_annotator,
        })
    }

    /// Builds a matrix from dense rows (`rows[i][j]`, `0` = missing) with
    /// generated ids `a0..`, `p0..`.
    pub fn from_dense(schema: AttributeSchema, rows: &[Vec<u32>]) -> Result<Self> {
        let n = rows.len();
        let p = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != p) {
            return Err(Error::input("dense rows have different lengths"));
        }
        let entries = rows.iter().enumerate().flat_map(|(i, row)| {
            row.iter()
                .enumerate()
                .map(move |(j, &v)| (i, j, ExtendedLabel(v)))
        });
        Self::from_entries(
            schema,
            (0..n).map(|i| format!("a{i}")).collect(),
            (0..p).map(|j| format!("p{j}")).collect(),
            entries,
        )
    }

    pub fn schema(&self) -> &AttributeSchema {
        &self.schema
    }

    pub fn num_labels(&self) -> usize {
        self.schema.num_labels()
    }

    pub fn n_annotators(&self) -> usize {
        self.annotator_ids.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn annotator_ids(&self) -> &[String] {
        &self.annotator_ids
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    /// `W_ij`, missing when unobserved.
    pub fn get(&self, annotator: usize, item: usize) -> ExtendedLabel {
        let row = &self.by_annotator[annotator];
        row.binary_search_by_key(&item, |&(j, _)| j)
            .map(|pos| row[pos].1)
            .unwrap_or(ExtendedLabel::MISSING)
    }

    /// `T_ij`.
    pub fn is_observed(&self, annotator: usize, item: usize) -> bool {
        !self.get(annotator, item).is_missing()
    }

    /// Observed `(annotator, label)` pairs for one item, by annotator index.
    pub fn item_votes(&self, item: usize) -> &[(usize, ExtendedLabel)] {
        &self.by_item[item]
    }

    /// Observed `(item, label)` pairs for one annotator, by item index.
    pub fn annotator_labels(&self, annotator: usize) -> &[(usize, ExtendedLabel)] {
        &self.by_annotator[annotator]
    }

    /// Number of stored entries, equal to the sum of the indicator matrix.
    pub fn stored_entries(&self) -> usize {
        self.by_item.iter().map(Vec::len).sum()
    }

    pub fn to_dense(&self) -> Vec<Vec<u32>> {
        let mut rows = vec![vec![0; self.n_items()]; self.n_annotators()];
        for (i, row) in self.by_annotator.iter().enumerate() {
            for &(j, label) in row {
                rows[i][j] = label.0;
            }
        }
        rows
    }

    /// One record per stored entry, annotator-major, with canonical label names.
    pub fn to_records(&self) -> Vec<AnnotationRecord> {
        let mut out = Vec::with_capacity(self.stored_entries());
        for (i, row) in self.by_annotator.iter().enumerate() {
            for &(j, label) in row {
                out.push(AnnotationRecord::new(
                    self.annotator_ids[i].as_str(),
                    self.item_ids[j].as_str(),
                    self.schema.name(),
                    self.schema.decode(label).unwrap_or_default(),
                ));
            }
        }
        out
    }

    pub fn indicator(&self) -> Vec<Vec<bool>> {
        self.to_dense()
            .into_iter()
            .map(|row| row.into_iter().map(|v| v != 0).collect())
            .collect()
    }
}

fn check_unique(kind: &str, ids: &[String]) -> Result<()> {
    let mut seen = HashMap::with_capacity(ids.len());
    for id in ids {
        if seen.insert(id.as_str(), ()).is_some() {
            return Err(Error::input(format!("duplicate {kind} id `{id}`")));
        }
    }
    Ok(())
}

/// Builds the annotation matrix for one attribute.
///
/// Annotator and item ids are indexed in order of first appearance, including
/// ids whose only records are out of vocabulary (those items abstain).
pub fn build_matrix(
    schema: &AttributeSchema,
    records: &[AnnotationRecord],
) -> Result<AnnotationMatrix> {
    let mut annotators: Vec<String> = Vec::new();
    let mut annotator_index: HashMap<&str, usize> = HashMap::new();
    let mut items: Vec<String> = Vec::new();
    let mut item_index: HashMap<&str, usize> = HashMap::new();
    let mut entries = Vec::with_capacity(records.len());

    for record in records {
        record.validate()?;
        if record.attribute != schema.name() {
            return Err(Error::input(format!(
                "record for attribute `{}` in a matrix for `{}` (annotator `{}`, item `{}`)",
                record.attribute,
                schema.name(),
                record.annotator_id,
                record.item_id
            )));
        }
        let i = *annotator_index
            .entry(record.annotator_id.as_str())
            .or_insert_with(|| {
                annotators.push(record.annotator_id.clone());
                annotators.len() - 1
            });
        let j = *item_index
            .entry(record.item_id.as_str())
            .or_insert_with(|| {
                items.push(record.item_id.clone());
                items.len() - 1
            });
        entries.push((i, j, encode_label(schema, &record.raw_label)));
    }

    AnnotationMatrix::from_entries(schema.clone(), annotators, items, entries)
}
