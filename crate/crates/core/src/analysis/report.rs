use serde::{Deserialize, Serialize};

use super::jaccard::{jaccard_topk, JaccardEntry};
use super::pca::{pca_project_2d, prompt_embedding, ProjectedPoint, Projection};
use super::shift::{representation_shift, PromptRole, ShiftEntry, ShiftReport};
use super::sweep::{SweepResult, SweepRow};
use crate::encoder::{SupervisionPoint, TextEncoder};
use crate::error::Result;

/// One plot-ready CSV row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvRecord {
    pub label: String,
    pub metric: String,
    pub probe: String,
    pub value: f64,
}

impl CsvRecord {
    fn new(label: &str, metric: &str, probe: impl ToString, value: f64) -> Self {
        Self {
            label: label.to_string(),
            metric: metric.to_string(),
            probe: probe.to_string(),
            value,
        }
    }
}

pub trait ToRecords {
    fn csv_records(&self) -> Vec<CsvRecord>;
}

impl ToRecords for ShiftReport {
    fn csv_records(&self) -> Vec<CsvRecord> {
        self.entries
            .iter()
            .flat_map(|e| {
                [
                    CsvRecord::new(&e.prompt, "cosine_distance", e.probe, e.cosine_distance),
                    CsvRecord::new(&e.prompt, "l2_distance", e.probe, e.l2_distance),
                ]
            })
            .collect()
    }
}

impl ToRecords for [JaccardEntry] {
    fn csv_records(&self) -> Vec<CsvRecord> {
        self.iter()
            .map(|e| CsvRecord::new(&e.prompt, "jaccard", e.probe, e.ratio))
            .collect()
    }
}

impl ToRecords for Projection {
    fn csv_records(&self) -> Vec<CsvRecord> {
        self.points
            .iter()
            .flat_map(|p| [CsvRecord::new(&p.label, "pca_x", "final", p.x), CsvRecord::new(&p.label, "pca_y", "final", p.y)])
            .collect()
    }
}

impl ToRecords for SweepResult {
    fn csv_records(&self) -> Vec<CsvRecord> {
        let mut out = Vec::new();
        for row in &self.rows {
            if let Some(o) = &row.outcome {
                out.push(CsvRecord::new(&row.label, "initial_loss", "supervision", o.initial_loss));
                out.push(CsvRecord::new(&row.label, "target_final_loss", "supervision", o.target_final_loss));
                out.push(CsvRecord::new(&row.label, "epochs_run", "supervision", o.epochs_run as f64));
                out.push(CsvRecord::new(&row.label, "target_shift", "final", o.target_shift));
                out.push(CsvRecord::new(&row.label, "mean_non_target_shift", "final", o.mean_non_target_shift));
            }
        }
        out
    }
}

/// Serializes each row as one JSON object per line.
pub fn to_jsonl<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut out, &row)?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn to_csv(records: &[CsvRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(w.into_inner().map_err(|e| e.into_error())?)
}

/// Shift, Jaccard and projection results for one original/erased pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub shift: ShiftReport,
    pub jaccard: Vec<JaccardEntry>,
    pub projection: Projection,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ReportLine<'a> {
    Shift(&'a ShiftEntry),
    Jaccard(&'a JaccardEntry),
    Projection(&'a ProjectedPoint),
    Sweep(&'a SweepRow),
}

impl AnalysisReport {
    pub fn to_jsonl(&self) -> Result<Vec<u8>> {
        let lines = self
            .shift
            .entries
            .iter()
            .map(ReportLine::Shift)
            .chain(self.jaccard.iter().map(ReportLine::Jaccard))
            .chain(self.projection.points.iter().map(ReportLine::Projection));
        to_jsonl(lines)
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut records = self.shift.csv_records();
        records.extend(self.jaccard.csv_records());
        records.extend(self.projection.csv_records());
        to_csv(&records)
    }
}

impl SweepResult {
    pub fn to_jsonl(&self) -> Result<Vec<u8>> {
        to_jsonl(self.rows.iter().map(ReportLine::Sweep))
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        to_csv(&self.csv_records())
    }
}

/// Runs the full comparison. Projection points are labelled
/// `original:<prompt>` and `erased:<prompt>`.
pub fn analyze(
    original: &TextEncoder,
    erased: &TextEncoder,
    targets: &[String],
    non_targets: &[String],
    jaccard_probes: &[SupervisionPoint],
    k: usize,
) -> Result<AnalysisReport> {
    let mut prompts = targets.to_vec();
    prompts.extend(non_targets.iter().cloned());
    let mut roles = vec![PromptRole::Target; targets.len()];
    roles.extend(vec![PromptRole::NonTarget; non_targets.len()]);
    let shift = representation_shift(original, erased, &prompts, &roles)?;

    let mut jaccard = Vec::new();
    for p in &prompts {
        for &probe in jaccard_probes {
            jaccard.push(jaccard_topk(original, erased, p, probe, k)?);
        }
    }

    let mut rows = Vec::with_capacity(2 * prompts.len());
    for (tag, enc) in [("original", original), ("erased", erased)] {
        for p in &prompts {
            rows.push((format!("{tag}:{p}"), prompt_embedding(enc, p)?));
        }
    }
    let projection = pca_project_2d(&rows)?;
    Ok(AnalysisReport {
        shift,
        jaccard,
        projection,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::jaccard_probes as default_probes;
    use crate::encoder::EncoderConfig;

    fn encoder() -> TextEncoder {
        let cfg = EncoderConfig {
            num_blocks: 2,
            model_dim: 8,
            num_heads: 2,
            ff_dim: 16,
            max_tokens: 6,
            ..EncoderConfig::default()
        };
        TextEncoder::init(&cfg, &["red car blue sky"]).unwrap()
    }

    #[test]
    fn csv_has_fixed_header() {
        let bytes = to_csv(&[CsvRecord::new("a", "m", "1-mlp_fc2", 0.5)]).unwrap();
        let text = String::from_utf8(bytes).unwrap();
        assert_eq!(text, "label,metric,probe,value\na,m,1-mlp_fc2,0.5\n");
    }

    #[test]
    fn analysis_report_serializes() {
        let enc = encoder();
        let rep = analyze(&enc, &enc, &["red car".into()], &["blue sky".into()], &default_probes(2), 4).unwrap();
        assert_eq!(rep.jaccard.len(), 4);
        assert!(rep.jaccard.iter().all(|j| j.ratio == 1.0));
        assert_eq!(rep.projection.points.len(), 4);
        let jsonl = String::from_utf8(rep.to_jsonl().unwrap()).unwrap();
        let n = rep.shift.entries.len() + rep.jaccard.len() + rep.projection.points.len();
        assert_eq!(jsonl.lines().count(), n);
        for line in jsonl.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(v.get("kind").is_some());
        }
        let csv = String::from_utf8(rep.to_csv().unwrap()).unwrap();
        assert!(csv.starts_with("label,metric,probe,value\n"));
        assert!(csv.contains("red car,jaccard,1-mlp_hidden,1"));
    }
}
