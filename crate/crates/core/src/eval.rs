//! Precision / recall bookkeeping, quantile-swept PR curves and the
//! per-category evaluation table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::categorizer::{quantile_threshold, Category, CategoryReport};
use crate::data::{format_float, LatentDataset, OOD_LABEL};
use crate::error::{Error, Result};

/// Confusion counts with their derived metrics. A metric whose denominator
/// is zero is `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn prf(pred: &[bool], gold: &[bool]) -> Result<Prf> {
    if pred.len() != gold.len() {
        return Err(Error::LengthMismatch {
            left: pred.len(),
            right: gold.len(),
        });
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&p, &g) in pred.iter().zip(gold) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(Prf {
        tp,
        fp,
        fn_,
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        f1: ratio(2 * tp, 2 * tp + fp + fn_),
    })
}

/// Share of (masked) rows whose prediction equals the gold label; gold
/// outliers never count as correct. `None` when no row is selected.
pub fn accuracy(y_true: &[i64], y_pred: &[usize], mask: Option<&[bool]>) -> Result<Option<f64>> {
    if y_true.len() != y_pred.len() {
        return Err(Error::LengthMismatch {
            left: y_true.len(),
            right: y_pred.len(),
        });
    }
    if let Some(m) = mask {
        if m.len() != y_true.len() {
            return Err(Error::LengthMismatch {
                left: y_true.len(),
                right: m.len(),
            });
        }
    }
    let (mut hits, mut total) = (0, 0);
    for i in 0..y_true.len() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        total += 1;
        if y_true[i] == y_pred[i] as i64 {
            hits += 1;
        }
    }
    Ok(ratio(hits, total))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub q: f64,
    pub threshold: f64,
    pub n_flagged: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    /// All scores equal, so every threshold flags nothing.
    pub degenerate: bool,
}

/// Sweeps `q` over `k / (n_points + 1)` for `k = 1..=n_points`, flags
/// `score > quantile_threshold(scores, q)` and scores the flags against gold.
pub fn pr_curve(scores: &[f64], gold: &[bool], n_points: usize) -> Result<PrCurve> {
    if n_points < 2 {
        return Err(Error::InvalidConfig(
            "a PR curve needs at least 2 points".into(),
        ));
    }
    if scores.len() != gold.len() {
        return Err(Error::LengthMismatch {
            left: scores.len(),
            right: gold.len(),
        });
    }
    let degenerate = scores.windows(2).all(|w| w[0] == w[1]);
    let mut points = Vec::with_capacity(n_points);
    for k in 1..=n_points {
        let q = k as f64 / (n_points + 1) as f64;
        let threshold = quantile_threshold(scores, q)?;
        let flagged: Vec<bool> = scores.iter().map(|&s| s > threshold).collect();
        let m = prf(&flagged, gold)?;
        points.push(PrPoint {
            q,
            threshold,
            n_flagged: m.tp + m.fp,
            precision: m.precision,
            recall: m.recall,
        });
    }
    Ok(PrCurve { points, degenerate })
}

fn cell(v: Option<f64>) -> String {
    v.map(format_float).unwrap_or_default()
}

/// Plot data: `score,q,threshold,n_flagged,precision,recall`, undefined
/// metrics left empty.
pub fn pr_curves_csv(curves: &[(&str, &PrCurve)]) -> String {
    let mut out = String::from("score,q,threshold,n_flagged,precision,recall\n");
    for (name, curve) in curves {
        for p in &curve.points {
            let _ = writeln!(
                out,
                "{name},{},{},{},{},{}",
                format_float(p.q),
                format_float(p.threshold),
                p.n_flagged,
                cell(p.precision),
                cell(p.recall)
            );
        }
    }
    out
}

/// Names of evaluation rows: the five categories plus the two unions that
/// count B&I as both Bnd and IDM.
pub const BND_OR_BI: &str = "Bnd+B&I";
pub const IDM_OR_BI: &str = "IDM+B&I";

/// Predicted membership for an evaluation row name.
pub fn predicted_mask(report: &CategoryReport, name: &str) -> Result<Vec<bool>> {
    let cats = report.categories();
    let pick = |set: &[Category]| cats.iter().map(|c| set.contains(c)).collect();
    Ok(match name {
        BND_OR_BI => pick(&[Category::Bnd, Category::BndIdm]),
        IDM_OR_BI => pick(&[Category::Idm, Category::BndIdm]),
        other => pick(&[other.parse::<Category>()?]),
    })
}

/// Externally supplied gold masks, keyed by evaluation row name.
pub type GoldMasks = BTreeMap<String, Vec<bool>>;

/// Reads `id,<name>,<name>...` with 0/1 cells and aligns it to `ids`.
pub fn parse_gold_masks<R: Read>(reader: R, ids: &[String]) -> Result<GoldMasks> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| Error::parse(1, e.to_string()))?
        .clone();
    if header.get(0) != Some("id") || header.len() < 2 {
        return Err(Error::parse(
            1,
            "malformed gold mask header, expected `id,<name>...`",
        ));
    }
    let names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    for n in &names {
        predicted_mask_name_ok(n).map_err(|e| Error::parse(1, e.to_string()))?;
    }
    let position: BTreeMap<&str, usize> = ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let mut masks: GoldMasks = names
        .iter()
        .map(|n| (n.clone(), vec![false; ids.len()]))
        .collect();
    let mut seen = vec![false; ids.len()];
    for (row, rec) in rdr.records().enumerate() {
        let line = row + 2;
        let rec = rec.map_err(|e| Error::parse(line, e.to_string()))?;
        if rec.len() != names.len() + 1 {
            return Err(Error::parse(line, "ragged gold mask row"));
        }
        let &i = position
            .get(&rec[0])
            .ok_or_else(|| Error::parse(line, format!("unknown id `{}`", &rec[0])))?;
        seen[i] = true;
        for (k, name) in names.iter().enumerate() {
            let v = match rec[k + 1].trim() {
                "1" | "true" => true,
                "0" | "false" => false,
                other => return Err(Error::parse(line, format!("bad mask value `{other}`"))),
            };
            masks.get_mut(name).expect("known name")[i] = v;
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::InvalidDataset(format!(
            "gold masks miss id `{}`",
            ids[i]
        )));
    }
    Ok(masks)
}

fn predicted_mask_name_ok(name: &str) -> Result<()> {
    match name {
        BND_OR_BI | IDM_OR_BI => Ok(()),
        other => other.parse::<Category>().map(|_| ()),
    }
}

pub fn load_gold_masks(path: &Path, ids: &[String]) -> Result<GoldMasks> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_gold_masks(f, ids)
}

pub fn write_gold_masks(ids: &[String], masks: &GoldMasks) -> String {
    let mut out = String::from("id");
    for name in masks.keys() {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for (i, id) in ids.iter().enumerate() {
        out.push_str(id);
        for m in masks.values() {
            out.push_str(if m[i] { ",1" } else { ",0" });
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub name: String,
    pub predicted: usize,
    pub gold: Option<usize>,
    pub metrics: Option<Prf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub rows: Vec<EvalRow>,
}

/// Per-category counts, with precision / recall / F1 wherever a gold mask is
/// known. Gold OOD always comes from `y_true = -1`.
pub fn category_report(
    report: &CategoryReport,
    gold: &LatentDataset,
    extra: &GoldMasks,
) -> Result<EvaluationSummary> {
    if report.examples.len() != gold.len() {
        return Err(Error::LengthMismatch {
            left: report.examples.len(),
            right: gold.len(),
        });
    }
    for (row, (e, id)) in report.examples.iter().zip(gold.ids()).enumerate() {
        if &e.id != id {
            return Err(Error::IdMismatch {
                row,
                left: e.id.clone(),
                right: id.clone(),
            });
        }
    }
    let mut golds = extra.clone();
    golds.insert(
        Category::Ood.name().to_string(),
        gold.y_true().iter().map(|&y| y == OOD_LABEL).collect(),
    );

    let mut names: Vec<String> = [
        Category::Ood,
        Category::Bnd,
        Category::Idm,
        Category::BndIdm,
        Category::Other,
        Category::Trusted,
    ]
    .iter()
    .map(|c| c.name().to_string())
    .collect();
    names.push(BND_OR_BI.into());
    names.push(IDM_OR_BI.into());
    for extra_name in extra.keys() {
        if !names.contains(extra_name) {
            names.push(extra_name.clone());
        }
    }

    let rows = names
        .into_iter()
        .map(|name| {
            let pred = predicted_mask(report, &name)?;
            let predicted = pred.iter().filter(|&&b| b).count();
            let (gold_n, metrics) = match golds.get(&name) {
                Some(g) => (Some(g.iter().filter(|&&b| b).count()), Some(prf(&pred, g)?)),
                None => (None, None),
            };
            Ok(EvalRow {
                name,
                predicted,
                gold: gold_n,
                metrics,
            })
        })
        .collect::<Result<_>>()?;
    Ok(EvaluationSummary { rows })
}

impl EvaluationSummary {
    pub fn row(&self, name: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
        let mut out = format!(
            "{:<10} {:>9} {:>6} {:>9} {:>9} {:>9}\n",
            "category", "predicted", "gold", "precision", "recall", "f1"
        );
        for r in &self.rows {
            let m = r.metrics;
            let _ = writeln!(
                out,
                "{:<10} {:>9} {:>6} {:>9} {:>9} {:>9}",
                r.name,
                r.predicted,
                r.gold.map(|g| g.to_string()).unwrap_or_else(|| "-".into()),
                fmt(m.and_then(|m| m.precision)),
                fmt(m.and_then(|m| m.recall)),
                fmt(m.and_then(|m| m.f1)),
            );
        }
        out
    }
}
