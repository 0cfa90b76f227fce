//! Audit reports and their serialized forms.
//!
//! Delimited output prints recalls and disparities with 4 decimals and
//! percentages with 2. The structured `report.json` keeps full precision.
//! Every file in [`table_files`] is always written, header-only when there
//! is nothing to put in it, so two runs always produce the same file set.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{Attribute, Group};
use crate::encoder::Policy;
use crate::metrics::{
    balanced_resample, disparity_report, improvement_pct, recall_table, Aggregation, ChoiceAnswer, DisparityReport,
    Outcome, RecallCell, ResampleSummary, ShiftMatrix,
};

mod svg;

pub use svg::{emit_heatmap, render_heatmap, GdMatrix};

/// Everything needed to recompute the numbers from the cache.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub dataset_digest: String,
    pub backend_ids: Vec<String>,
    pub models: Vec<String>,
    pub prompt_style: String,
    pub template_ids: Vec<String>,
    pub encoder_policy: Policy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embed_provider: Option<String>,
    pub seed: u64,
    pub aggregation: Aggregation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResampleSpec {
    pub sizes: Vec<usize>,
    pub trials: usize,
}

impl Default for ResampleSpec {
    fn default() -> Self {
        ResampleSpec {
            sizes: vec![500, 1000, 1500],
            trials: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallTable {
    pub attribute: Attribute,
    pub cells: Vec<RecallCell>,
}

/// One resampling run, or the reason it could not run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResampleRow {
    pub attribute: Attribute,
    pub pair: (String, String),
    pub n_per_group: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<ResampleSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Results for one model under one prompt style.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelAudit {
    pub model: String,
    pub prompt_style: String,
    pub images: usize,
    pub recall_tables: Vec<RecallTable>,
    pub disparities: Vec<DisparityReport>,
    /// Filled only when macro aggregation was requested alongside micro.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub macro_disparities: Vec<DisparityReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub resamples: Vec<ResampleRow>,
}

/// Pairs of an attribute where both groups have at least one outcome.
pub fn populated_pairs(outcomes: &[Outcome], attribute: Attribute) -> Vec<(Group, Group)> {
    let present = |g: Group| outcomes.iter().any(|o| o.group(attribute) == g);
    attribute
        .reported_pairs()
        .into_iter()
        .filter(|&(a, b)| present(a) && present(b))
        .collect()
}

impl ModelAudit {
    pub fn build(
        model: &str,
        prompt_style: &str,
        outcomes: &[Outcome],
        aggregation: Aggregation,
        include_macro: bool,
        resample: Option<(&ResampleSpec, u64)>,
    ) -> Self {
        let mut audit = ModelAudit {
            model: model.to_string(),
            prompt_style: prompt_style.to_string(),
            images: outcomes.len(),
            recall_tables: Vec::new(),
            disparities: Vec::new(),
            macro_disparities: Vec::new(),
            resamples: Vec::new(),
        };
        for attribute in Attribute::ALL {
            let pairs = populated_pairs(outcomes, attribute);
            if pairs.is_empty() {
                continue;
            }
            audit.recall_tables.push(RecallTable {
                attribute,
                cells: recall_table(outcomes, attribute),
            });
            for (a, b) in pairs {
                if let Ok(d) = disparity_report(outcomes, a, b, aggregation) {
                    audit.disparities.push(d);
                }
                if include_macro && aggregation != Aggregation::Macro {
                    if let Ok(d) = disparity_report(outcomes, a, b, Aggregation::Macro) {
                        audit.macro_disparities.push(d);
                    }
                }
                let Some((spec, seed)) = resample else { continue };
                for &n in &spec.sizes {
                    let result = balanced_resample(outcomes, a, b, n, spec.trials, seed);
                    audit.resamples.push(ResampleRow {
                        attribute,
                        pair: (a.label().to_string(), b.label().to_string()),
                        n_per_group: n,
                        error: result.as_ref().err().map(|e| e.to_string()),
                        summary: result.ok(),
                    });
                }
            }
        }
        audit
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MitigationMetric {
    /// `R_<group>` or `GD_<first>_<second>`.
    pub metric: String,
    pub raw: f64,
    pub with_rationale: f64,
    /// `None` when the raw value is 0.
    pub improvement_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MitigationRow {
    pub model: String,
    pub attribute: Attribute,
    pub pair: (String, String),
    pub metrics: Vec<MitigationMetric>,
}

fn metric(name: String, raw: f64, with_rationale: f64) -> MitigationMetric {
    MitigationMetric {
        metric: name,
        raw,
        with_rationale,
        improvement_pct: improvement_pct(raw, with_rationale).ok(),
    }
}

/// Raw against with-rationale recalls and disparity for every populated pair.
pub fn mitigation_rows(
    model: &str,
    raw: &[Outcome],
    mitigated: &[Outcome],
    aggregation: Aggregation,
) -> Vec<MitigationRow> {
    let mut rows = Vec::new();
    for attribute in Attribute::ALL {
        for (a, b) in populated_pairs(raw, attribute) {
            let (Ok(before), Ok(after)) = (
                disparity_report(raw, a, b, aggregation),
                disparity_report(mitigated, a, b, aggregation),
            ) else {
                continue;
            };
            rows.push(MitigationRow {
                model: model.to_string(),
                attribute,
                pair: before.pair.clone(),
                metrics: vec![
                    metric(format!("R_{}", a.label()), before.first_recall, after.first_recall),
                    metric(format!("R_{}", b.label()), before.second_recall, after.second_recall),
                    metric(
                        format!("GD_{}_{}", a.label(), b.label()),
                        before.overall_gd,
                        after.overall_gd,
                    ),
                ],
            });
        }
    }
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftRow {
    pub model: String,
    pub matrix: ShiftMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub metadata: RunMetadata,
    pub models: Vec<ModelAudit>,
    #[serde(default)]
    pub mitigation: Vec<MitigationRow>,
    #[serde(default)]
    pub shifts: Vec<ShiftRow>,
}

impl AuditReport {
    pub fn new(metadata: RunMetadata) -> Self {
        AuditReport {
            metadata,
            models: Vec::new(),
            mitigation: Vec::new(),
            shifts: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Formats {
    pub delimited: bool,
    pub structured: bool,
}

impl Default for Formats {
    fn default() -> Self {
        Formats {
            delimited: true,
            structured: true,
        }
    }
}

/// Four decimals, with negative zero printed as zero.
pub fn fmt4(x: f64) -> String {
    let s = format!("{x:.4}");
    if s == "-0.0000" {
        "0.0000".into()
    } else {
        s
    }
}

pub fn fmt_pct(x: f64) -> String {
    let s = format!("{x:.2}%");
    if s == "-0.00%" {
        "0.00%".into()
    } else {
        s
    }
}

fn pair_slug(attribute: Attribute, a: Group, b: Group) -> String {
    format!("{}_{}_{}", attribute.name(), a.label(), b.label())
}

/// The delimited files [`emit_tables`] writes, in write order.
pub fn table_files() -> Vec<String> {
    let mut files = Vec::new();
    for attribute in Attribute::ALL {
        files.push(format!("recall_{}.csv", attribute.name()));
        for (a, b) in attribute.reported_pairs() {
            let slug = pair_slug(attribute, a, b);
            files.push(format!("disparity_{slug}.csv"));
            files.push(format!("disparity_macro_{slug}.csv"));
            files.push(format!("class_disparity_{slug}.csv"));
        }
    }
    files.extend(["resample.csv", "shift.csv", "mitigation.csv"].map(String::from));
    files
}

type Rows = Vec<Vec<String>>;

fn write_csv(path: &Path, header: &[String], rows: &Rows) -> io::Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush()
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

fn recall_rows(report: &AuditReport, attribute: Attribute) -> Rows {
    let mut rows = Vec::new();
    for m in &report.models {
        for table in m.recall_tables.iter().filter(|t| t.attribute == attribute) {
            for c in &table.cells {
                rows.push(vec![
                    m.model.clone(),
                    m.prompt_style.clone(),
                    c.class.clone().unwrap_or_else(|| "overall".into()),
                    c.group.clone(),
                    c.n.to_string(),
                    c.k.to_string(),
                    fmt4(c.recall),
                ]);
            }
        }
    }
    rows
}

fn matches(d: &DisparityReport, attribute: Attribute, a: Group, b: Group) -> bool {
    d.attribute == attribute && d.pair.0 == a.label() && d.pair.1 == b.label()
}

fn disparity_rows(report: &AuditReport, attribute: Attribute, a: Group, b: Group, macro_: bool) -> Rows {
    let mut rows = Vec::new();
    for m in &report.models {
        let list = if macro_ { &m.macro_disparities } else { &m.disparities };
        for d in list.iter().filter(|d| matches(d, attribute, a, b)) {
            rows.push(vec![
                m.model.clone(),
                m.prompt_style.clone(),
                fmt4(d.first_recall),
                fmt4(d.second_recall),
                fmt4(d.overall_gd),
            ]);
        }
    }
    rows
}

fn class_rows(report: &AuditReport, attribute: Attribute, a: Group, b: Group) -> Rows {
    let opt = |c: &Option<RecallCell>| c.as_ref().map(|c| fmt4(c.recall)).unwrap_or_default();
    let mut rows = Vec::new();
    for m in &report.models {
        for d in m.disparities.iter().filter(|d| matches(d, attribute, a, b)) {
            for c in &d.per_class {
                rows.push(vec![
                    m.model.clone(),
                    m.prompt_style.clone(),
                    c.class.clone(),
                    opt(&c.first),
                    opt(&c.second),
                    c.gd.map(fmt4).unwrap_or_default(),
                ]);
            }
        }
    }
    rows
}

fn resample_rows(report: &AuditReport) -> Rows {
    let mut rows = Vec::new();
    for m in &report.models {
        for r in &m.resamples {
            let (mean, se, degenerate) = match &r.summary {
                Some(s) => (fmt4(s.mean), fmt4(s.standard_error), s.degenerate.to_string()),
                None => Default::default(),
            };
            let trials = r.summary.as_ref().map(|s| s.trials.to_string()).unwrap_or_default();
            rows.push(vec![
                m.model.clone(),
                m.prompt_style.clone(),
                r.attribute.name().to_string(),
                r.pair.0.clone(),
                r.pair.1.clone(),
                r.n_per_group.to_string(),
                trials,
                mean,
                se,
                degenerate,
                r.error.clone().unwrap_or_default(),
            ]);
        }
    }
    rows
}

fn shift_rows(report: &AuditReport) -> Rows {
    let mut rows = Vec::new();
    for s in &report.shifts {
        for from in ChoiceAnswer::ALL {
            let mut row = vec![s.model.clone(), from.label().to_string()];
            row.extend(ChoiceAnswer::ALL.iter().map(|&to| s.matrix.get(from, to).to_string()));
            row.push(s.matrix.row_sum(from).to_string());
            rows.push(row);
        }
    }
    rows
}

fn mitigation_table(report: &AuditReport) -> Rows {
    let mut rows = Vec::new();
    for r in &report.mitigation {
        for m in &r.metrics {
            rows.push(vec![
                r.model.clone(),
                r.attribute.name().to_string(),
                m.metric.clone(),
                fmt4(m.raw),
                fmt4(m.with_rationale),
                m.improvement_pct.map(fmt_pct).unwrap_or_default(),
            ]);
        }
    }
    rows
}

/// Write the report into `dir`. Returns the paths written.
pub fn emit_tables(report: &AuditReport, dir: &Path, formats: Formats) -> io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    if formats.delimited {
        let mut emit = |name: String, header: Vec<String>, rows: Rows| -> io::Result<()> {
            let path = dir.join(name);
            write_csv(&path, &header, &rows)?;
            written.push(path);
            Ok(())
        };
        let lead = strings(&["model", "prompt_style"]);
        for attribute in Attribute::ALL {
            let mut header = lead.clone();
            header.extend(strings(&["class", "group", "n", "k", "recall"]));
            emit(
                format!("recall_{}.csv", attribute.name()),
                header,
                recall_rows(report, attribute),
            )?;
            for (a, b) in attribute.reported_pairs() {
                let slug = pair_slug(attribute, a, b);
                let mut header = lead.clone();
                header.extend([
                    format!("R_{}", a.label()),
                    format!("R_{}", b.label()),
                    format!("GD_{}_{}", a.label(), b.label()),
                ]);
                emit(
                    format!("disparity_{slug}.csv"),
                    header.clone(),
                    disparity_rows(report, attribute, a, b, false),
                )?;
                emit(
                    format!("disparity_macro_{slug}.csv"),
                    header.clone(),
                    disparity_rows(report, attribute, a, b, true),
                )?;
                header.insert(2, "class".into());
                emit(
                    format!("class_disparity_{slug}.csv"),
                    header,
                    class_rows(report, attribute, a, b),
                )?;
            }
        }
        let mut header = lead.clone();
        header.extend(strings(&[
            "attribute",
            "first",
            "second",
            "n_per_group",
            "trials",
            "mean_gd",
            "standard_error",
            "degenerate",
            "error",
        ]));
        emit("resample.csv".into(), header, resample_rows(report))?;
        emit(
            "shift.csv".into(),
            strings(&["model", "raw_answer", "Yes", "No", "Unknown", "total"]),
            shift_rows(report),
        )?;
        emit(
            "mitigation.csv".into(),
            strings(&["model", "attribute", "metric", "raw", "with_rationale", "improvement"]),
            mitigation_table(report),
        )?;
    }
    if formats.structured {
        let path = dir.join("report.json");
        let mut text = serde_json::to_string_pretty(report)?;
        text.push('\n');
        fs::write(&path, text)?;
        written.push(path);
    }
    Ok(written)
}

pub fn read_report(path: &Path) -> io::Result<AuditReport> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}
