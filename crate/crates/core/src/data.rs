//! Domain types shared by every stage of the pipeline, the latent-CSV
//! interchange format and z-score normalization.
//!
//! A latent CSV has the header `id,y_true,y_pred[,u],h0,...,h{d-1}`. Gold
//! outliers carry `y_true = -1`. Each file may be accompanied by a sidecar
//! `<name>.meta.json` holding `{num_classes, dim, split}`; when present it
//! fixes the class count used for validation.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label used in `y_true` for examples that belong to no training class.
pub const OOD_LABEL: i64 = -1;

const STD_FLOOR: f64 = 1e-12;

/// A (true class, predicted class) couple indexing one validation corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClassPair {
    pub true_class: usize,
    pub pred_class: usize,
}

impl ClassPair {
    pub fn new(true_class: usize, pred_class: usize, num_classes: usize) -> Result<Self> {
        if true_class >= num_classes || pred_class >= num_classes {
            return Err(Error::InvalidDataset(format!(
                "class pair ({true_class}, {pred_class}) outside [0, {num_classes})"
            )));
        }
        Ok(ClassPair {
            true_class,
            pred_class,
        })
    }

    pub fn is_correct(&self) -> bool {
        self.true_class == self.pred_class
    }
}

/// Sidecar metadata written next to every CSV file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub num_classes: usize,
    pub dim: usize,
    pub split: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl DatasetMeta {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("meta serializes");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// `data/train.csv` -> `data/train.meta.json`.
pub fn meta_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("meta.json")
}

fn split_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Labelled points in latent space, together with the model's predictions and
/// an optional per-example uncertainty score.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDataset {
    ids: Vec<String>,
    latents: Array2<f64>,
    y_true: Vec<i64>,
    y_pred: Vec<usize>,
    uncertainty: Option<Vec<f64>>,
    num_classes: usize,
}

impl LatentDataset {
    pub fn new(
        ids: Vec<String>,
        latents: Array2<f64>,
        y_true: Vec<i64>,
        y_pred: Vec<usize>,
        uncertainty: Option<Vec<f64>>,
        num_classes: usize,
    ) -> Result<Self> {
        let n = latents.nrows();
        if num_classes < 2 {
            return Err(Error::InvalidDataset(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        if latents.ncols() == 0 {
            return Err(Error::InvalidDataset(
                "latent dimension must be >= 1".into(),
            ));
        }
        for len in [ids.len(), y_true.len(), y_pred.len()] {
            if len != n {
                return Err(Error::LengthMismatch {
                    left: n,
                    right: len,
                });
            }
        }
        if let Some(u) = &uncertainty {
            if u.len() != n {
                return Err(Error::LengthMismatch {
                    left: n,
                    right: u.len(),
                });
            }
            if let Some(i) = u.iter().position(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidDataset(format!(
                    "uncertainty {} at row {i} outside [0, 1]",
                    u[i]
                )));
            }
        }
        if let Some(i) = y_pred.iter().position(|&c| c >= num_classes) {
            return Err(Error::InvalidDataset(format!(
                "predicted class {} at row {i} outside [0, {num_classes})",
                y_pred[i]
            )));
        }
        if let Some(i) = y_true
            .iter()
            .position(|&c| c != OOD_LABEL && !(0..num_classes as i64).contains(&c))
        {
            return Err(Error::InvalidDataset(format!(
                "true class {} at row {i} outside [0, {num_classes})",
                y_true[i]
            )));
        }
        if latents.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidDataset("non-finite latent value".into()));
        }
        Ok(LatentDataset {
            ids,
            latents,
            y_true,
            y_pred,
            uncertainty,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.latents.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.latents.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn latents(&self) -> ArrayView2<'_, f64> {
        self.latents.view()
    }

    pub fn latent(&self, i: usize) -> ArrayView1<'_, f64> {
        self.latents.row(i)
    }

    pub fn y_true(&self) -> &[i64] {
        &self.y_true
    }

    pub fn y_pred(&self) -> &[usize] {
        &self.y_pred
    }

    pub fn uncertainty(&self) -> Option<&[f64]> {
        self.uncertainty.as_deref()
    }

    /// True class as an index, `None` for gold outliers.
    pub fn true_class(&self, i: usize) -> Option<usize> {
        usize::try_from(self.y_true[i]).ok()
    }

    pub fn is_correct(&self, i: usize) -> bool {
        self.true_class(i) == Some(self.y_pred[i])
    }

    /// Fraction of rows whose prediction matches the gold label. Gold outliers
    /// count as errors.
    pub fn accuracy(&self) -> Option<f64> {
        if self.is_empty() {
            return None;
        }
        let hits = (0..self.len()).filter(|&i| self.is_correct(i)).count();
        Some(hits as f64 / self.len() as f64)
    }

    /// Same labels, new latent matrix (e.g. after normalization).
    pub fn with_latents(&self, latents: Array2<f64>) -> Result<Self> {
        if latents.dim() != self.latents.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: latents.ncols(),
            });
        }
        Ok(LatentDataset {
            latents,
            ..self.clone()
        })
    }

    pub fn with_uncertainty(mut self, u: Vec<f64>) -> Result<Self> {
        let ds = LatentDataset::new(
            std::mem::take(&mut self.ids),
            std::mem::take(&mut self.latents),
            std::mem::take(&mut self.y_true),
            std::mem::take(&mut self.y_pred),
            Some(u),
            self.num_classes,
        )?;
        Ok(ds)
    }

    /// Rows at `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        LatentDataset {
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
            latents: self.latents.select(Axis(0), indices),
            y_true: indices.iter().map(|&i| self.y_true[i]).collect(),
            y_pred: indices.iter().map(|&i| self.y_pred[i]).collect(),
            uncertainty: self
                .uncertainty
                .as_ref()
                .map(|u| indices.iter().map(|&i| u[i]).collect()),
            num_classes: self.num_classes,
        }
    }
}

/// Labelled raw features (model inputs), as emitted by the generators.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    pub ids: Vec<String>,
    pub features: Array2<f64>,
    pub y_true: Vec<i64>,
    pub num_classes: usize,
}

impl FeatureDataset {
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Rows with a real class label, and those labels as indices.
    pub fn labelled(&self) -> (Array2<f64>, Vec<usize>) {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| self.y_true[i] >= 0).collect();
        let x = self.features.select(Axis(0), &keep);
        let y = keep.iter().map(|&i| self.y_true[i] as usize).collect();
        (x, y)
    }
}

/// Per-dimension mean and (population) standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl NormalizationStats {
    pub fn identity(dim: usize) -> Self {
        NormalizationStats {
            means: vec![0.0; dim],
            stds: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.means.len()
    }

    /// Column statistics of a raw matrix. Zero-variance columns get std 1.
    pub fn fit(x: ArrayView2<'_, f64>) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::Empty("cannot fit normalization on zero rows"));
        }
        let n = x.nrows() as f64;
        let mut means = Vec::with_capacity(x.ncols());
        let mut stds = Vec::with_capacity(x.ncols());
        for col in x.columns() {
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let std = var.sqrt();
            means.push(mean);
            stds.push(if std < STD_FLOOR { 1.0 } else { std });
        }
        Ok(NormalizationStats { means, stds })
    }

    pub fn transform(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: x.ncols(),
            });
        }
        let means = Array1::from(self.means.clone());
        let stds = Array1::from(self.stds.clone());
        Ok((&x - &means) / &stds)
    }
}

/// Fits z-score statistics on the latents of `ds`.
pub fn zscore_fit(ds: &LatentDataset) -> Result<NormalizationStats> {
    NormalizationStats::fit(ds.latents())
}

/// Returns a copy of `ds` with latents mapped to `(x - mean) / std`.
pub fn zscore_apply(ds: &LatentDataset, stats: &NormalizationStats) -> Result<LatentDataset> {
    ds.with_latents(stats.transform(ds.latents())?)
}

/// Shortest representation that parses back to the same `f64`.
pub fn format_float(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || (1e-5..1e16).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

struct Header {
    has_u: bool,
    dim: usize,
}

fn parse_header(record: &csv::StringRecord, label_cols: &[&str], prefix: &str) -> Result<Header> {
    let cols: Vec<&str> = record.iter().map(str::trim).collect();
    if cols.len() < label_cols.len() || cols[..label_cols.len()] != *label_cols {
        return Err(Error::parse(
            1,
            format!(
                "malformed header, expected to start with `{}`",
                label_cols.join(",")
            ),
        ));
    }
    let mut rest = &cols[label_cols.len()..];
    let has_u = prefix == "h" && rest.first() == Some(&"u");
    if has_u {
        rest = &rest[1..];
    }
    if rest.is_empty() {
        return Err(Error::parse(1, "malformed header, no latent columns"));
    }
    for (j, name) in rest.iter().enumerate() {
        if *name != format!("{prefix}{j}") {
            return Err(Error::parse(
                1,
                format!("malformed header, expected `{prefix}{j}` but found `{name}`"),
            ));
        }
    }
    Ok(Header {
        has_u,
        dim: rest.len(),
    })
}

fn parse_f64(cell: &str, line: usize, what: &str) -> Result<f64> {
    let v: f64 = cell
        .trim()
        .parse()
        .map_err(|_| Error::parse(line, format!("non-numeric {what} `{cell}`")))?;
    if !v.is_finite() {
        return Err(Error::parse(line, format!("non-finite {what} `{cell}`")));
    }
    Ok(v)
}

fn parse_label(cell: &str, line: usize, what: &str) -> Result<i64> {
    cell.trim()
        .parse()
        .map_err(|_| Error::parse(line, format!("non-integer {what} `{cell}`")))
}

fn csv_reader<R: Read>(reader: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader)
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    Error::parse(line, e.to_string())
}

/// Parses latent CSV text. `num_classes = None` infers the count from the
/// largest label present (at least 2).
pub fn parse_latent_csv<R: Read>(reader: R, num_classes: Option<usize>) -> Result<LatentDataset> {
    let mut rdr = csv_reader(reader);
    let mut records = rdr.records();
    let header = match records.next() {
        Some(r) => parse_header(&r.map_err(csv_error)?, &["id", "y_true", "y_pred"], "h")?,
        None => return Err(Error::parse(1, "malformed header, file is empty")),
    };
    let width = 3 + header.has_u as usize + header.dim;

    let mut ids = Vec::new();
    let mut values = Vec::new();
    let mut y_true = Vec::new();
    let mut y_pred_raw = Vec::new();
    let mut u = header.has_u.then(Vec::new);
    for (row, rec) in records.enumerate() {
        let line = row + 2;
        let rec = rec.map_err(csv_error)?;
        if rec.len() != width {
            return Err(Error::parse(
                line,
                format!("ragged row with {} fields, expected {width}", rec.len()),
            ));
        }
        ids.push(rec[0].to_string());
        let t = parse_label(&rec[1], line, "y_true")?;
        let p = parse_label(&rec[2], line, "y_pred")?;
        if t < OOD_LABEL || p < 0 {
            return Err(Error::parse(line, "class index out of range"));
        }
        y_true.push((t, line));
        y_pred_raw.push((p as usize, line));
        let mut col = 3;
        if let Some(u) = u.as_mut() {
            let v = parse_f64(&rec[3], line, "uncertainty")?;
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::parse(
                    line,
                    format!("uncertainty {v} outside [0, 1]"),
                ));
            }
            u.push(v);
            col += 1;
        }
        for j in 0..header.dim {
            values.push(parse_f64(&rec[col + j], line, "latent value")?);
        }
    }

    let max_label = y_true
        .iter()
        .map(|&(t, _)| t.max(0) as usize)
        .chain(y_pred_raw.iter().map(|&(p, _)| p))
        .max()
        .unwrap_or(0);
    let num_classes = num_classes.unwrap_or((max_label + 1).max(2));
    for (&(t, line), &(p, _)) in y_true.iter().zip(&y_pred_raw) {
        if p >= num_classes || t >= num_classes as i64 {
            return Err(Error::parse(line, "class index out of range"));
        }
    }

    let n = ids.len();
    let latents = Array2::from_shape_vec((n, header.dim), values).expect("row widths checked");
    LatentDataset::new(
        ids,
        latents,
        y_true.into_iter().map(|(t, _)| t).collect(),
        y_pred_raw.into_iter().map(|(p, _)| p).collect(),
        u,
        num_classes,
    )
}

/// Loads a latent CSV; the sidecar meta file, if any, supplies the class count
/// and is checked against the parsed dimension.
pub fn load_latent_csv(path: &Path) -> Result<LatentDataset> {
    let meta = {
        let p = meta_path(path);
        if p.exists() {
            Some(DatasetMeta::load(&p)?)
        } else {
            None
        }
    };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let ds = parse_latent_csv(file, meta.as_ref().map(|m| m.num_classes))?;
    if let Some(m) = meta {
        if m.dim != ds.dim() {
            return Err(Error::DimensionMismatch {
                expected: m.dim,
                found: ds.dim(),
            });
        }
    }
    Ok(ds)
}

pub fn write_latent_csv<W: Write>(ds: &LatentDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["id".to_string(), "y_true".into(), "y_pred".into()];
    if ds.uncertainty.is_some() {
        header.push("u".into());
    }
    header.extend((0..ds.dim()).map(|j| format!("h{j}")));
    w.write_record(&header).map_err(csv_error)?;
    for i in 0..ds.len() {
        let mut rec = vec![
            ds.ids[i].clone(),
            ds.y_true[i].to_string(),
            ds.y_pred[i].to_string(),
        ];
        if let Some(u) = &ds.uncertainty {
            rec.push(format_float(u[i]));
        }
        rec.extend(ds.latents.row(i).iter().map(|&v| format_float(v)));
        w.write_record(&rec).map_err(csv_error)?;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))
}

/// Writes `ds` as a latent CSV plus its `.meta.json` sidecar.
pub fn save_latent_csv(ds: &LatentDataset, path: &Path, seed: Option<u64>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_latent_csv(ds, BufWriter::new(file))?;
    DatasetMeta {
        num_classes: ds.num_classes,
        dim: ds.dim(),
        split: split_name(path),
        seed,
    }
    .save(&meta_path(path))
}

pub fn parse_feature_csv<R: Read>(reader: R, num_classes: Option<usize>) -> Result<FeatureDataset> {
    let mut rdr = csv_reader(reader);
    let mut records = rdr.records();
    let header = match records.next() {
        Some(r) => parse_header(&r.map_err(csv_error)?, &["id", "y_true"], "x")?,
        None => return Err(Error::parse(1, "malformed header, file is empty")),
    };
    let width = 2 + header.dim;
    let mut ids = Vec::new();
    let mut values = Vec::new();
    let mut y_true = Vec::new();
    for (row, rec) in records.enumerate() {
        let line = row + 2;
        let rec = rec.map_err(csv_error)?;
        if rec.len() != width {
            return Err(Error::parse(
                line,
                format!("ragged row with {} fields, expected {width}", rec.len()),
            ));
        }
        ids.push(rec[0].to_string());
        let t = parse_label(&rec[1], line, "y_true")?;
        if t < OOD_LABEL || num_classes.is_some_and(|c| t >= c as i64) {
            return Err(Error::parse(line, "class index out of range"));
        }
        y_true.push(t);
        for j in 0..header.dim {
            values.push(parse_f64(&rec[2 + j], line, "feature value")?);
        }
    }
    let num_classes = num_classes
        .unwrap_or_else(|| (y_true.iter().copied().max().unwrap_or(0) as usize + 1).max(2));
    let n = ids.len();
    Ok(FeatureDataset {
        ids,
        features: Array2::from_shape_vec((n, header.dim), values).expect("row widths checked"),
        y_true,
        num_classes,
    })
}

pub fn load_feature_csv(path: &Path) -> Result<FeatureDataset> {
    let p = meta_path(path);
    let meta = if p.exists() {
        Some(DatasetMeta::load(&p)?)
    } else {
        None
    };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_feature_csv(file, meta.map(|m| m.num_classes))
}

pub fn write_feature_csv<W: Write>(ds: &FeatureDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["id".to_string(), "y_true".into()];
    header.extend((0..ds.dim()).map(|j| format!("x{j}")));
    w.write_record(&header).map_err(csv_error)?;
    for i in 0..ds.len() {
        let mut rec = vec![ds.ids[i].clone(), ds.y_true[i].to_string()];
        rec.extend(ds.features.row(i).iter().map(|&v| format_float(v)));
        w.write_record(&rec).map_err(csv_error)?;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))
}

pub fn save_feature_csv(ds: &FeatureDataset, path: &Path, seed: Option<u64>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_feature_csv(ds, BufWriter::new(file))?;
    DatasetMeta {
        num_classes: ds.num_classes,
        dim: ds.dim(),
        split: split_name(path),
        seed,
    }
    .save(&meta_path(path))
}
