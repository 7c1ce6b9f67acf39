//! Text and JSON rendering of analysis outcomes and sweep tables.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::Serialize;

use crate::catalog::FlowSet;
use crate::scenario::{orderings, project, InstanceRecord, Outcome, ProjectedView, ViewLevel};
use crate::select::{Row, RowState};

#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub peak: usize,
    pub peak_step: usize,
    #[serde(rename = "final")]
    pub final_count: usize,
    pub halt_step: i64,
    pub halt_link: i64,
    pub halt_link_name: Option<String>,
    pub steps: usize,
    pub memory_proxy: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioReport {
    pub instances: Vec<InstanceRecord>,
    pub facts: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalysisReport {
    pub level: u8,
    pub metrics: MetricsReport,
    /// Full scenarios, for Type-3 reports.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scenarios: Option<Vec<ScenarioReport>>,
    /// Distinct projected views, for Type-1 and Type-2 reports.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub views: Option<Vec<ProjectedView>>,
}

impl AnalysisReport {
    pub fn new(fs: &FlowSet, out: &Outcome, level: ViewLevel) -> AnalysisReport {
        let metrics = MetricsReport {
            peak: out.metrics.peak,
            peak_step: out.metrics.peak_step,
            final_count: out.metrics.final_count,
            halt_step: out.halt_step(),
            halt_link: out.halt_link(),
            halt_link_name: out.halt.as_ref().map(|h| h.link_name.clone()),
            steps: out.metrics.steps,
            memory_proxy: out.metrics.memory_proxy,
        };
        let records: Vec<Vec<InstanceRecord>> = out.scenarios.iter().map(|s| s.records(fs)).collect();
        if level == ViewLevel::Type3 {
            let scenarios = records
                .into_iter()
                .map(|r| ScenarioReport {
                    facts: orderings(&r).iter().map(|f| f.to_string()).collect(),
                    instances: r,
                })
                .collect();
            AnalysisReport {
                level: 3,
                metrics,
                scenarios: Some(scenarios),
                views: None,
            }
        } else {
            let views: BTreeSet<ProjectedView> = records.iter().map(|r| project(r, level)).collect();
            AnalysisReport {
                level: level as u8,
                metrics,
                scenarios: None,
                views: Some(views.into_iter().collect()),
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let m = &self.metrics;
        let mut s = String::new();
        writeln!(s, "metrics:").unwrap();
        writeln!(s, "  peak: {} (step {})", m.peak, m.peak_step).unwrap();
        writeln!(s, "  final: {}", m.final_count).unwrap();
        writeln!(s, "  halt_step: {}", m.halt_step).unwrap();
        match &m.halt_link_name {
            Some(n) => writeln!(s, "  halt_link: {} ({n})", m.halt_link).unwrap(),
            None => writeln!(s, "  halt_link: {}", m.halt_link).unwrap(),
        }
        writeln!(s, "  steps: {}", m.steps).unwrap();
        writeln!(s, "  memory_proxy: {:.1}", m.memory_proxy).unwrap();
        if let Some(scens) = &self.scenarios {
            for (i, sc) in scens.iter().enumerate() {
                writeln!(s, "scenario {i}:").unwrap();
                for r in &sc.instances {
                    let end = r.end.map_or("-1".to_string(), |e| e.to_string());
                    writeln!(
                        s,
                        "  {:<36} marking={:<8} start={:<5} end={:<5} path={}",
                        r.id(),
                        r.marking,
                        r.start,
                        end,
                        r.path.join(",")
                    )
                    .unwrap();
                }
                for f in &sc.facts {
                    writeln!(s, "  fact: {f}").unwrap();
                }
            }
        }
        if let Some(views) = &self.views {
            for (i, v) in views.iter().enumerate() {
                writeln!(s, "view {i} (type {}):", self.level).unwrap();
                for (flow, n) in &v.counts {
                    writeln!(s, "  count {flow}: {n}").unwrap();
                }
                for inst in &v.instances {
                    match inst.complete {
                        Some(c) => writeln!(s, "  {} complete={c}", inst.id).unwrap(),
                        None => writeln!(s, "  {}", inst.id).unwrap(),
                    }
                }
                for f in &v.facts {
                    writeln!(s, "  fact: {f}").unwrap();
                }
            }
        }
        s
    }
}

fn state_text(st: &RowState) -> String {
    match st {
        RowState::Completed => "ok".into(),
        RowState::Inconsistent { step, link } => format!("halt@{step}/{link}"),
        RowState::ComplexityExceeded { step } => format!("complexity@{step}"),
        RowState::TimeLimit { step } => format!("timeout@{step}"),
    }
}

/// Tab-separated sweep table. Runtime is included only when `timing` is set.
pub fn sweep_table(rows: &[Row], timing: bool) -> String {
    let mut s = String::from("strategy\tfields\tbits\tstate\tfinal\tpeak\tmemory_proxy\tground_truth");
    if timing {
        s.push_str("\ttime_s");
    }
    s.push('\n');
    for r in rows {
        let mode = r.strategy.split('+').next().unwrap_or_default();
        write!(
            s,
            "{mode}\t{}\t{}\t{}\t{}\t{}\t{:.1}\t{}",
            r.fields,
            r.bits,
            state_text(&r.state),
            r.final_count.map_or("-".into(), |f| f.to_string()),
            r.peak,
            r.memory_proxy,
            r.ground_truth_found.map_or("-".into(), |g| g.to_string()),
        )
        .unwrap();
        if timing {
            write!(s, "\t{:.3}", r.runtime.as_secs_f64()).unwrap();
        }
        s.push('\n');
    }
    s
}
