//! Deterministic report rendering: machine-readable JSON and a plain-text
//! narrative of the same content.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::accountability::pathway::{InterventionDiff, PathwayTrace};

/// Output format for reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Json,
    Text,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "text" => Ok(ReportFormat::Text),
            other => Err(Error::config(format!(
                "unknown report format '{other}' (expected json or text)"
            ))),
        }
    }
}

/// Everything one explanation emits: the pre-intervention pathway and, when
/// an intervention ran, the post pathway plus the structured diff.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainReport {
    pub pathway: PathwayTrace,
    pub post_pathway: Option<PathwayTrace>,
    pub diff: Option<InterventionDiff>,
}

/// Render a report. Byte-stable for a fixed input; the JSON form re-parses
/// to an equal `ExplainReport`.
pub fn emit_report(report: &ExplainReport, format: ReportFormat) -> Result<String> {
    report.pathway.influence.verify_decomposition(1e-9)?;
    if let Some(post) = &report.post_pathway {
        post.influence.verify_decomposition(1e-9)?;
    }
    match format {
        ReportFormat::Json => Ok(serde_json::to_string_pretty(report)? + "\n"),
        ReportFormat::Text => Ok(render_text(report)),
    }
}

/// Parse a JSON report back.
pub fn parse_report(json: &str) -> Result<ExplainReport> {
    Ok(serde_json::from_str(json)?)
}

fn render_pathway(out: &mut String, p: &PathwayTrace, title: &str) {
    out.push_str(&format!("{title}\n"));
    out.push_str(&format!("{}\n", "-".repeat(title.len())));
    out.push_str(&format!("example:     {}\n", p.example_id));
    out.push_str(&format!(
        "stage:       {}\n",
        match p.stage {
            crate::accountability::PathwayStage::Pre => "pre-intervention",
            crate::accountability::PathwayStage::Post => "post-intervention",
        }
    ));
    if let Some(words) = &p.words {
        out.push_str(&format!("input:       {}\n", words.join(" ")));
    } else {
        out.push_str(&format!(
            "input:       {} tokens {:?}\n",
            p.tokens.len(),
            p.tokens
        ));
    }
    out.push_str(&format!("prediction:  {}\n", p.task_prediction));
    out.push_str(&format!(
        "task logits: [{}]\n",
        p.task_logits
            .iter()
            .map(|v| format!("{v:.6}"))
            .collect::<Vec<_>>()
            .join(", ")
    ));
    out.push_str("concepts (by |influence|):\n");
    for &k in &p.ranking {
        let c = &p.concepts[k];
        out.push_str(&format!(
            "  {:<12} = {:<10} p={:.4}  influence={:+.6}  budget={}\n",
            c.concept, c.predicted_value, c.probability, c.influence, c.budget
        ));
        for (layer, experts) in c.experts_per_layer.iter().enumerate() {
            let gates = experts
                .iter()
                .map(|(e, g)| format!("e{e}:{g:.4}"))
                .collect::<Vec<_>>()
                .join(" ");
            out.push_str(&format!("      layer {layer}: {gates}\n"));
        }
    }
}

fn render_text(report: &ExplainReport) -> String {
    let mut out = String::new();
    render_pathway(&mut out, &report.pathway, "Decision pathway");
    if let Some(post) = &report.post_pathway {
        out.push('\n');
        render_pathway(&mut out, post, "Decision pathway (after intervention)");
    }
    out.push('\n');
    match &report.diff {
        None => out.push_str("Intervention\n------------\nnone (no intervention ran)\n"),
        Some(diff) if diff.is_empty() => {
            out.push_str("Intervention diff\n-----------------\nno changes\n");
        }
        Some(diff) => {
            out.push_str("Intervention diff\n-----------------\n");
            out.push_str(&format!(
                "task: {} -> {}{}\n",
                diff.task_before,
                diff.task_after,
                if diff.task_changed { "  (changed)" } else { "" }
            ));
            for c in &diff.concepts {
                if !c.changed {
                    continue;
                }
                out.push_str(&format!(
                    "  {}: {} (p={:.4}) -> {} (p={:.4}), budget {} -> {}\n",
                    c.concept,
                    c.value_before,
                    c.probability_before,
                    c.value_after,
                    c.probability_after,
                    c.budget_before,
                    c.budget_after
                ));
                for (layer, deltas) in c.gate_deltas.iter().enumerate() {
                    let rendered = deltas
                        .iter()
                        .map(|(e, d)| format!("e{e}:{d:+.4}"))
                        .collect::<Vec<_>>()
                        .join(" ");
                    out.push_str(&format!("      layer {layer} gate deltas: {rendered}\n"));
                }
            }
        }
    }
    out
}
