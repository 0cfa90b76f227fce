//! Per-class disparity heatmaps as SVG.
//!
//! Rows are models, columns are classes. The color scale diverges from a
//! neutral gray at 0: positive disparity (first group favored) shades red,
//! negative shades blue, saturating at the largest magnitude in the grid.
//! Each cell also carries its value as text.

use std::fmt::Write as _;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{fmt4, AuditReport};
use crate::dataset::{Attribute, Group};

pub const NEUTRAL: (u8, u8, u8) = (247, 247, 247);
pub const WARM: (u8, u8, u8) = (178, 24, 43);
pub const COOL: (u8, u8, u8) = (33, 102, 172);

const CELL_W: usize = 72;
const CELL_H: usize = 28;
const LEFT: usize = 140;
const TOP: usize = 110;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GdMatrix {
    pub attribute: Attribute,
    pub pair: (String, String),
    pub rows: Vec<String>,
    pub columns: Vec<String>,
    /// `values[row][column]`; `None` where a group had no image of the class.
    pub values: Vec<Vec<Option<f64>>>,
}

impl GdMatrix {
    /// Collect the per-class disparities of one pair across the report's
    /// models. Classes keep first-seen order.
    pub fn from_report(report: &AuditReport, first: Group, second: Group) -> Self {
        let attribute = first.attribute();
        let pair = (first.label().to_string(), second.label().to_string());
        let mut rows = Vec::new();
        let mut columns: Vec<String> = Vec::new();
        let mut found = Vec::new();
        for m in &report.models {
            let Some(d) = m
                .disparities
                .iter()
                .find(|d| d.attribute == attribute && d.pair == pair)
            else {
                continue;
            };
            rows.push(m.model.clone());
            for c in &d.per_class {
                if !columns.contains(&c.class) {
                    columns.push(c.class.clone());
                }
            }
            found.push(d);
        }
        let values = found
            .iter()
            .map(|d| {
                columns
                    .iter()
                    .map(|class| d.per_class.iter().find(|c| &c.class == class).and_then(|c| c.gd))
                    .collect()
            })
            .collect();
        GdMatrix {
            attribute,
            pair,
            rows,
            columns,
            values,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty() || self.columns.is_empty()
    }

    fn scale(&self) -> f64 {
        self.values
            .iter()
            .flatten()
            .flatten()
            .fold(0.0, |m: f64, v| m.max(v.abs()))
    }
}

fn lerp(a: (u8, u8, u8), b: (u8, u8, u8), t: f64) -> (u8, u8, u8) {
    let mix = |x: u8, y: u8| (x as f64 + (y as f64 - x as f64) * t).round() as u8;
    (mix(a.0, b.0), mix(a.1, b.1), mix(a.2, b.2))
}

/// Fill color of a value on a scale saturating at `scale`.
pub fn cell_color(value: f64, scale: f64) -> (u8, u8, u8) {
    if value == 0.0 || scale <= 0.0 {
        return NEUTRAL;
    }
    let t = (value.abs() / scale).min(1.0);
    lerp(NEUTRAL, if value > 0.0 { WARM } else { COOL }, t)
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

pub fn render_heatmap(matrix: &GdMatrix) -> String {
    let scale = matrix.scale();
    let width = LEFT + CELL_W * matrix.columns.len() + 20;
    let height = TOP + CELL_H * matrix.rows.len() + 40;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        s,
        r#"<title>GD {} {} - {}</title>"#,
        matrix.attribute.name(),
        escape(&matrix.pair.0),
        escape(&matrix.pair.1)
    );
    for (j, class) in matrix.columns.iter().enumerate() {
        let x = LEFT + CELL_W * j + CELL_W / 2;
        let _ = writeln!(
            s,
            r#"<text x="{x}" y="{}" transform="rotate(-40 {x} {})" text-anchor="start">{}</text>"#,
            TOP - 6,
            TOP - 6,
            escape(class)
        );
    }
    for (i, row) in matrix.rows.iter().enumerate() {
        let y = TOP + CELL_H * i;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            LEFT - 6,
            y + CELL_H / 2 + 4,
            escape(row)
        );
        for (j, value) in matrix.values[i].iter().enumerate() {
            let x = LEFT + CELL_W * j;
            let (fill, label) = match value {
                Some(v) => {
                    let (r, g, b) = cell_color(*v, scale);
                    (format!("#{r:02x}{g:02x}{b:02x}"), fmt4(*v))
                }
                None => ("#ffffff".to_string(), "n/a".to_string()),
            };
            let _ = writeln!(
                s,
                r##"<rect x="{x}" y="{y}" width="{CELL_W}" height="{CELL_H}" fill="{fill}" stroke="#999999"/>"##
            );
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle">{label}</text>"#,
                x + CELL_W / 2,
                y + CELL_H / 2 + 4
            );
        }
    }
    let _ = writeln!(
        s,
        r#"<text x="{LEFT}" y="{}">red: {} favored, blue: {} favored, scale ±{}</text>"#,
        height - 14,
        escape(&matrix.pair.0),
        escape(&matrix.pair.1),
        fmt4(scale)
    );
    s.push_str("</svg>\n");
    s
}

/// Write the heatmap of a nonempty matrix.
pub fn emit_heatmap(matrix: &GdMatrix, path: &Path) -> io::Result<()> {
    if matrix.is_empty() {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "heatmap matrix is empty"));
    }
    std::fs::write(path, render_heatmap(matrix))
}
