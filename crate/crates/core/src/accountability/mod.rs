//! Retrospective explanation: influence decomposition, pathway backtracking,
//! intervention diffs, and report rendering.

mod influence;
mod pathway;
mod report;

pub use influence::{concept_influence, InfluenceReport};
pub use pathway::{
    backtrack, diff_interventions, ConceptDiff, ConceptNode, InterventionDiff, PathwayStage,
    PathwayTrace,
};
pub use report::{emit_report, parse_report, ExplainReport, ReportFormat};
