//! Dice scores, per-dataset summaries and ablation report emission.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::LabelMap;

/// Dice overlap of `class_id` between two label maps.
///
/// Both sets empty scores 1.0; exactly one empty scores 0.0.
pub fn dice(pred: &LabelMap, truth: &LabelMap, class_id: u8) -> Result<f64> {
    pred.check_same_shape(truth)?;
    if !pred.classes().contains(class_id) || !truth.classes().contains(class_id) {
        return Err(Error::invalid(format!("unknown class id {class_id}")));
    }
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data().iter().zip(truth.data()) {
        let in_p = a == class_id;
        let in_g = b == class_id;
        p += in_p as usize;
        g += in_g as usize;
        both += (in_p && in_g) as usize;
    }
    Ok(match (p, g) {
        (0, 0) => 1.0,
        _ => 2.0 * both as f64 / (p + g) as f64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub median: f64,
    pub n: usize,
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::invalid("cannot summarize an empty list"));
    }
    let n = values.len();
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    // sum in sorted order so the result does not depend on input order
    let mean = sorted.iter().sum::<f64>() / n as f64;
    let var = sorted.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    Ok(Summary {
        mean,
        std: var.sqrt(),
        median,
        n,
    })
}

/// One line of a results table in the layout
/// "method | training data | Dice".
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationRow {
    pub method: String,
    /// Dataset roles whose cases (or labels) fed the model, e.g. `["A", "B"]`.
    pub training_data: Vec<String>,
    pub tumor: Summary,
    pub pancreas: Summary,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Markdown,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Self::Json),
            "markdown" | "md" => Ok(Self::Markdown),
            "csv" => Ok(Self::Csv),
            other => Err(Error::invalid(format!("unknown report format `{other}`"))),
        }
    }
}

const COLUMNS: [&str; 5] = [
    "Method",
    "Training data",
    "Tumor Dice (mean±std)",
    "Tumor Dice (median)",
    "Pancreas Dice (mean±std)",
];

/// Renders the table. Human formats use 4 decimals, JSON keeps full precision.
pub fn emit_report(table: &AblationTable, format: ReportFormat) -> Result<String> {
    if table.rows.is_empty() {
        return Err(Error::invalid("empty ablation table"));
    }
    match format {
        ReportFormat::Json => {
            let mut s =
                serde_json::to_string_pretty(table).map_err(|e| Error::invalid(e.to_string()))?;
            s.push('\n');
            Ok(s)
        }
        ReportFormat::Markdown => Ok(markdown(table)),
        ReportFormat::Csv => csv_report(table),
    }
}

pub fn parse_json_report(text: &str) -> Result<AblationTable> {
    serde_json::from_str(text).map_err(|e| Error::invalid(format!("bad report json: {e}")))
}

fn markdown(table: &AblationTable) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "| {} |", COLUMNS.join(" | "));
    let _ = writeln!(out, "|{}", "---|".repeat(COLUMNS.len()));
    for r in &table.rows {
        let _ = writeln!(
            out,
            "| {} | {} | {:.4}±{:.4} | {:.4} | {:.4}±{:.4} |",
            r.method.replace('|', "\\|"),
            roles_label(&r.training_data),
            r.tumor.mean,
            r.tumor.std,
            r.tumor.median,
            r.pancreas.mean,
            r.pancreas.std
        );
    }
    out
}

fn roles_label(roles: &[String]) -> String {
    format!("Data {}", roles.join(", "))
}

fn csv_report(table: &AblationTable) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let header = [
        "method",
        "training_data",
        "tumor_dice_mean",
        "tumor_dice_std",
        "tumor_dice_median",
        "pancreas_dice_mean",
        "pancreas_dice_std",
    ];
    let to_err = |e: csv::Error| Error::invalid(e.to_string());
    w.write_record(header).map_err(to_err)?;
    for r in &table.rows {
        w.write_record([
            r.method.clone(),
            r.training_data.join("+"),
            format!("{:.4}", r.tumor.mean),
            format!("{:.4}", r.tumor.std),
            format!("{:.4}", r.tumor.median),
            format!("{:.4}", r.pancreas.mean),
            format!("{:.4}", r.pancreas.std),
        ])
        .map_err(to_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{ClassTable, VoxelGrid};

    fn labels(data: Vec<u8>) -> LabelMap {
        let n = data.len();
        LabelMap::new(
            VoxelGrid::new([n, 1, 1], [1.0; 3], data).unwrap(),
            ClassTable::seg3(),
        )
        .unwrap()
    }

    #[test]
    fn dice_examples() {
        let a = labels(vec![0, 2, 2, 1]);
        assert_eq!(dice(&a, &a, 2).unwrap(), 1.0);
        assert_eq!(
            dice(&labels(vec![2, 0]), &labels(vec![0, 2]), 2).unwrap(),
            0.0
        );
        assert_eq!(
            dice(&labels(vec![0, 0]), &labels(vec![1, 1]), 2).unwrap(),
            1.0
        );
        assert_eq!(
            dice(&labels(vec![2, 0]), &labels(vec![0, 0]), 2).unwrap(),
            0.0
        );
        // |P| = 4, |G| = 8, overlap 4
        let p = labels([vec![2; 4], vec![0; 6]].concat());
        let g = labels([vec![2; 8], vec![0; 2]].concat());
        assert!((dice(&p, &g, 2).unwrap() - 8.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn dice_errors() {
        let a = labels(vec![0, 1]);
        assert!(dice(&a, &a, 3).is_err());
        assert!(dice(&a, &labels(vec![0, 1, 2]), 1).is_err());
    }

    #[test]
    fn summary_examples() {
        let s = summarize(&[0.5]).unwrap();
        assert_eq!((s.mean, s.std, s.median), (0.5, 0.0, 0.5));
        let s = summarize(&[0.8, 0.2, 0.6, 0.4]).unwrap();
        assert!((s.mean - 0.5).abs() < 1e-12);
        assert!((s.median - 0.5).abs() < 1e-12);
        assert!((s.std - 0.05f64.sqrt()).abs() < 1e-12);
        assert!((s.std - 0.2236).abs() < 1e-4);
        assert!(summarize(&[]).is_err());
    }

    fn table() -> AblationTable {
        let s = summarize(&[0.61, 0.7, 0.55]).unwrap();
        AblationTable {
            rows: vec![
                AblationRow {
                    method: "teacher: venous".into(),
                    training_data: vec!["B".into()],
                    tumor: s,
                    pancreas: s,
                },
                AblationRow {
                    method: "student, \"quoted\"".into(),
                    training_data: vec!["A".into(), "B".into(), "C".into()],
                    tumor: s,
                    pancreas: s,
                },
            ],
        }
    }

    #[test]
    fn report_formats() {
        let t = table();
        let json = emit_report(&t, ReportFormat::Json).unwrap();
        assert_eq!(parse_json_report(&json).unwrap(), t);

        let md = emit_report(&t, ReportFormat::Markdown).unwrap();
        assert_eq!(md.lines().count(), t.rows.len() + 2);
        assert!(md.contains("| Data A, B, C |"));

        let csv = emit_report(&t, ReportFormat::Csv).unwrap();
        let mut r = csv::Reader::from_reader(csv.as_bytes());
        let width = r.headers().unwrap().len();
        let rows: Vec<_> = r.records().map(|x| x.unwrap()).collect();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|x| x.len() == width));
        assert_eq!(&rows[1][0], "student, \"quoted\"");

        assert!("xml".parse::<ReportFormat>().is_err());
        assert!(emit_report(&AblationTable::default(), ReportFormat::Json).is_err());
    }
}
