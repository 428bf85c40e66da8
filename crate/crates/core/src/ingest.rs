//! Reading expression matrices and metadata tables, merging feature spaces
//! and joining everything into a labeled dataset.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{concatenate, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::AgeBinning;

/// Feature namespace of an expression matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Namespace {
    Srna,
    Contam,
}

impl Namespace {
    pub fn prefix(self) -> &'static str {
        match self {
            Namespace::Srna => "srna:",
            Namespace::Contam => "contam:",
        }
    }
}

/// Features × samples matrix of non-negative values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpressionMatrix {
    pub feature_ids: Vec<String>,
    pub sample_ids: Vec<String>,
    /// Shape `(feature_ids.len(), sample_ids.len())`.
    pub values: Array2<f64>,
}

fn first_duplicate<'a>(ids: impl IntoIterator<Item = &'a String>) -> Option<&'a String> {
    let mut seen = HashSet::new();
    ids.into_iter().find(|id| !seen.insert(id.as_str()))
}

impl ExpressionMatrix {
    /// Builds a matrix, checking every invariant.
    pub fn new(feature_ids: Vec<String>, sample_ids: Vec<String>, values: Array2<f64>) -> Result<Self> {
        if values.nrows() != feature_ids.len() {
            return Err(Error::Dimension {
                expected: feature_ids.len(),
                got: values.nrows(),
            });
        }
        if values.ncols() != sample_ids.len() {
            return Err(Error::Dimension {
                expected: sample_ids.len(),
                got: values.ncols(),
            });
        }
        if let Some(d) = first_duplicate(&feature_ids) {
            return Err(Error::data(format!("duplicate feature id {d:?}")));
        }
        if let Some(d) = first_duplicate(&sample_ids) {
            return Err(Error::data(format!("duplicate sample id {d:?}")));
        }
        if let Some(((f, s), v)) = values.indexed_iter().find(|(_, v)| !v.is_finite() || **v < 0.0) {
            return Err(Error::data(format!(
                "value {v} for feature {:?} sample {:?} is not a finite non-negative number",
                feature_ids[f], sample_ids[s]
            )));
        }
        Ok(Self {
            feature_ids,
            sample_ids,
            values,
        })
    }

    pub fn n_features(&self) -> usize {
        self.feature_ids.len()
    }

    pub fn n_samples(&self) -> usize {
        self.sample_ids.len()
    }

    /// Samples × features copy, the layout the learners consume.
    pub fn sample_major(&self) -> Array2<f64> {
        self.values.t().as_standard_layout().into_owned()
    }

    /// Restricts the matrix to the given sample columns, in the given order.
    pub fn select_samples(&self, cols: &[usize]) -> Self {
        Self {
            feature_ids: self.feature_ids.clone(),
            sample_ids: cols.iter().map(|&c| self.sample_ids[c].clone()).collect(),
            values: self.values.select(Axis(1), cols),
        }
    }

    /// Restricts the matrix to the given feature rows, in the given order.
    pub fn select_features(&self, rows: &[usize]) -> Self {
        Self {
            feature_ids: rows.iter().map(|&r| self.feature_ids[r].clone()).collect(),
            sample_ids: self.sample_ids.clone(),
            values: self.values.select(Axis(0), rows),
        }
    }

    /// Writes the matrix in the TSV layout read by [`load_expression_matrix`].
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut out = || -> std::io::Result<()> {
            write!(w, "feature_id")?;
            for s in &self.sample_ids {
                write!(w, "\t{s}")?;
            }
            writeln!(w)?;
            for (f, row) in self.feature_ids.iter().zip(self.values.rows()) {
                write!(w, "{f}")?;
                for v in row {
                    write!(w, "\t{v}")?;
                }
                writeln!(w)?;
            }
            w.flush()
        };
        out().map_err(|e| Error::io(path, e))
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Reads a feature × sample TSV and prefixes every feature id with `namespace`
/// (ids already carrying that prefix are kept as they are).
pub fn load_expression_matrix(path: &Path, namespace: Namespace) -> Result<ExpressionMatrix> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_expression_matrix(&text, path, namespace)
}

pub(crate) fn parse_expression_matrix(text: &str, path: &Path, namespace: Namespace) -> Result<ExpressionMatrix> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end_matches('\r')));
    let (_, header) = lines.next().ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let mut cells = header.split('\t');
    if cells.next() != Some("feature_id") {
        return Err(parse_err(path, 1, "header must start with \"feature_id\""));
    }
    let sample_ids: Vec<String> = cells.map(str::to_owned).collect();
    if sample_ids.iter().any(String::is_empty) {
        return Err(parse_err(path, 1, "empty sample id in header"));
    }
    if let Some(d) = first_duplicate(&sample_ids) {
        return Err(parse_err(path, 1, format!("duplicate sample id {d:?}")));
    }

    let prefix = namespace.prefix();
    let mut feature_ids = Vec::new();
    let mut seen = HashSet::new();
    let mut flat = Vec::new();
    for (line_no, line) in lines {
        if line.is_empty() {
            continue;
        }
        let mut cells = line.split('\t');
        let raw_id = cells.next().unwrap_or_default();
        if raw_id.is_empty() {
            return Err(parse_err(path, line_no, "empty feature id"));
        }
        let id = if raw_id.starts_with(prefix) {
            raw_id.to_owned()
        } else {
            format!("{prefix}{raw_id}")
        };
        if !seen.insert(id.clone()) {
            return Err(parse_err(path, line_no, format!("duplicate feature id {raw_id:?}")));
        }
        let mut n = 0;
        for cell in cells {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| parse_err(path, line_no, format!("non-numeric value {cell:?}")))?;
            if !v.is_finite() || v < 0.0 {
                return Err(parse_err(path, line_no, format!("value {cell:?} must be finite and non-negative")));
            }
            flat.push(v);
            n += 1;
        }
        if n != sample_ids.len() {
            return Err(parse_err(
                path,
                line_no,
                format!("expected {} values, found {n}", sample_ids.len()),
            ));
        }
        feature_ids.push(id);
    }
    let values = Array2::from_shape_vec((feature_ids.len(), sample_ids.len()), flat)
        .expect("row lengths checked while parsing");
    Ok(ExpressionMatrix {
        feature_ids,
        sample_ids,
        values,
    })
}

/// Concatenates the feature axes of two matrices over the same samples.
pub fn merge_matrices(a: &ExpressionMatrix, b: &ExpressionMatrix) -> Result<ExpressionMatrix> {
    if a.sample_ids != b.sample_ids {
        return Err(Error::data("cannot merge matrices with different sample ids or order"));
    }
    let ids: HashSet<&str> = a.feature_ids.iter().map(String::as_str).collect();
    if let Some(dup) = b.feature_ids.iter().find(|f| ids.contains(f.as_str())) {
        return Err(Error::data(format!("feature id {dup:?} present in both matrices")));
    }
    let values = concatenate(Axis(0), &[a.values.view(), b.values.view()]).expect("sample axes agree");
    Ok(ExpressionMatrix {
        feature_ids: a.feature_ids.iter().chain(&b.feature_ids).cloned().collect(),
        sample_ids: a.sample_ids.clone(),
        values,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sex {
    Male,
    Female,
}

impl Sex {
    pub fn as_str(self) -> &'static str {
        match self {
            Sex::Male => "male",
            Sex::Female => "female",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetadataRow {
    pub sample_id: String,
    pub dataset_id: String,
    pub tissue: Option<String>,
    pub sex: Option<Sex>,
    pub age: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetadataTable {
    pub rows: Vec<MetadataRow>,
}

pub const METADATA_HEADER: &str = "sample_id\tdataset_id\ttissue\tsex\tage";

impl MetadataTable {
    pub fn new(rows: Vec<MetadataRow>) -> Result<Self> {
        if let Some(d) = first_duplicate(rows.iter().map(|r| &r.sample_id)) {
            return Err(Error::data(format!("duplicate metadata row for sample {d:?}")));
        }
        if let Some(r) = rows
            .iter()
            .find(|r| r.age.is_some_and(|a| !a.is_finite() || !(0.0..=130.0).contains(&a)))
        {
            return Err(Error::data(format!("age of sample {:?} outside [0, 130]", r.sample_id)));
        }
        Ok(Self { rows })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end_matches('\r')));
        match lines.next() {
            Some((_, h)) if h == METADATA_HEADER => {}
            _ => return Err(parse_err(path, 1, format!("header must be {METADATA_HEADER:?}"))),
        }
        let mut rows = Vec::new();
        let mut seen = HashSet::new();
        for (line_no, line) in lines {
            if line.is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split('\t').collect();
            if cells.len() != 5 {
                return Err(parse_err(path, line_no, format!("expected 5 columns, found {}", cells.len())));
            }
            if cells[0].is_empty() {
                return Err(parse_err(path, line_no, "empty sample id"));
            }
            if !seen.insert(cells[0]) {
                return Err(parse_err(path, line_no, format!("duplicate sample id {:?}", cells[0])));
            }
            let sex = match cells[3] {
                "" => None,
                "male" => Some(Sex::Male),
                "female" => Some(Sex::Female),
                other => return Err(parse_err(path, line_no, format!("unknown sex {other:?}"))),
            };
            let age = match cells[4] {
                "" => None,
                a => {
                    let v: f64 = a
                        .parse()
                        .map_err(|_| parse_err(path, line_no, format!("non-numeric age {a:?}")))?;
                    if !v.is_finite() || !(0.0..=130.0).contains(&v) {
                        return Err(parse_err(path, line_no, format!("age {a} outside [0, 130]")));
                    }
                    Some(v)
                }
            };
            rows.push(MetadataRow {
                sample_id: cells[0].to_owned(),
                dataset_id: cells[1].to_owned(),
                tissue: (!cells[2].is_empty()).then(|| cells[2].to_owned()),
                sex,
                age,
            });
        }
        Ok(Self { rows })
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut s = String::from(METADATA_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                r.sample_id,
                r.dataset_id,
                r.tissue.as_deref().unwrap_or(""),
                r.sex.map_or("", Sex::as_str),
                r.age.map(|a| a.to_string()).unwrap_or_default()
            ));
        }
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn get(&self, sample_id: &str) -> Option<&MetadataRow> {
        self.rows.iter().find(|r| r.sample_id == sample_id)
    }
}

/// Metadata field used as the prediction target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelField {
    Tissue,
    Sex,
    AgeInterval,
}

impl fmt::Display for LabelField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LabelField::Tissue => "tissue",
            LabelField::Sex => "sex",
            LabelField::AgeInterval => "age_interval",
        })
    }
}

/// Expression matrix joined with metadata and an integer-encoded label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedDataset {
    pub matrix: ExpressionMatrix,
    /// One row per matrix sample, same order.
    pub metadata: Vec<MetadataRow>,
    pub label_field: LabelField,
    pub labels: Vec<usize>,
    /// Sorted lexicographically; a label is an index into this list.
    pub class_names: Vec<String>,
}

impl AnnotatedDataset {
    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.matrix.n_features()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes()];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Keeps the given samples; class names and encoding stay unchanged.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            matrix: self.matrix.select_samples(idx),
            metadata: idx.iter().map(|&i| self.metadata[i].clone()).collect(),
            label_field: self.label_field,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
        }
    }

    /// Replaces the matrix (e.g. after scaling or filtering) keeping samples.
    pub fn with_matrix(&self, matrix: ExpressionMatrix) -> Result<Self> {
        if matrix.sample_ids != self.matrix.sample_ids {
            return Err(Error::data("replacement matrix has different samples"));
        }
        Ok(Self {
            matrix,
            ..self.clone()
        })
    }

    pub fn dataset_ids(&self) -> Vec<&str> {
        self.metadata.iter().map(|m| m.dataset_id.as_str()).collect()
    }
}

/// Result of [`join`]: the dataset and how many samples were dropped for
/// lacking the requested label (or a metadata row).
#[derive(Debug, Clone)]
pub struct Joined {
    pub dataset: AnnotatedDataset,
    pub dropped: usize,
}

fn label_value(row: &MetadataRow, field: LabelField, ages: Option<&AgeBinning>) -> Result<Option<String>> {
    Ok(match field {
        LabelField::Tissue => row.tissue.clone(),
        LabelField::Sex => row.sex.map(|s| s.as_str().to_owned()),
        LabelField::AgeInterval => match row.age {
            None => None,
            Some(a) => Some(
                ages.expect("checked by join")
                    .bin(a)
                    .map_err(|e| Error::data(format!("sample {:?}: {e}", row.sample_id)))?
                    .to_owned(),
            ),
        },
    })
}

/// Joins a matrix with metadata, dropping samples without the label field.
pub fn join(
    matrix: &ExpressionMatrix,
    meta: &MetadataTable,
    label_field: LabelField,
    age_scheme: Option<&AgeBinning>,
) -> Result<Joined> {
    if label_field == LabelField::AgeInterval && age_scheme.is_none() {
        return Err(Error::config("label field age_interval requires an age scheme"));
    }
    let by_id: HashMap<&str, &MetadataRow> = meta.rows.iter().map(|r| (r.sample_id.as_str(), r)).collect();
    let mut keep = Vec::new();
    let mut rows = Vec::new();
    let mut values = Vec::new();
    for (col, sid) in matrix.sample_ids.iter().enumerate() {
        let Some(row) = by_id.get(sid.as_str()) else {
            continue;
        };
        if let Some(v) = label_value(row, label_field, age_scheme)? {
            keep.push(col);
            rows.push((*row).clone());
            values.push(v);
        }
    }
    let dropped = matrix.n_samples() - keep.len();
    if keep.is_empty() {
        return Err(Error::data(format!("no sample has a value for label field {label_field}")));
    }
    let class_names: Vec<String> = values.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let labels = values
        .iter()
        .map(|v| class_names.binary_search(v).expect("value collected above"))
        .collect();
    if dropped > 0 {
        log::info!("join: dropped {dropped} samples without {label_field}");
    }
    Ok(Joined {
        dataset: AnnotatedDataset {
            matrix: matrix.select_samples(&keep),
            metadata: rows,
            label_field,
            labels,
            class_names,
        },
        dropped,
    })
}
