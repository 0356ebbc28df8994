//! Accuracy tables with the difference from the teacher in brackets.

use serde::{Deserialize, Serialize};

/// Formats an accuracy cell, e.g. `71.73 (-10.71)` for 71.73 against a teacher at 82.44.
pub fn format_cell(top1_pct: f64, teacher_pct: f64) -> String {
    let top1 = round2(top1_pct);
    let mut delta = round2(top1 - round2(teacher_pct));
    if delta == 0.0 {
        delta = 0.0;
    }
    format!("{top1:.2} ({delta:+.2})")
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyEntry {
    pub model: String,
    pub recipe: String,
    pub split_point: String,
    pub channels: usize,
    /// Top-1 accuracy as a fraction in [0, 1].
    pub top1: f64,
    pub teacher_top1: f64,
}

/// Markdown table, one row per entry in the given order.
pub fn accuracy_table(entries: &[AccuracyEntry]) -> String {
    let mut out = String::from("| model | recipe | split | channels | top-1 [%] |\n|---|---|---|---|---|\n");
    for e in entries {
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} |\n",
            e.model,
            e.recipe,
            e.split_point,
            e.channels,
            format_cell(100.0 * e.top1, 100.0 * e.teacher_top1)
        ));
    }
    out
}
