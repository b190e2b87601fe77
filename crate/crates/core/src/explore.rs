//! Policy sweeps: one simulation per point of a policy cross product, with a
//! long-format CSV of per-run metrics.

use std::io::Write;

use serde::Serialize;

use crate::backend::report::RunReport;
use crate::backend::sim::{run_simulation, Horizon};
use crate::document::TaskSetDocument;
use crate::error::{Error, Result};
use crate::model::{MappingScheme, PriorityAssignment, VersionFilter};

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub mappings: Vec<MappingScheme>,
    pub priorities: Vec<PriorityAssignment>,
    pub preemptive: Vec<bool>,
    pub version_filters: Vec<VersionFilter>,
    pub repetitions: u32,
    pub horizon: Option<Horizon>,
    /// Repetition `r` runs with `seed + r`.
    pub seed: u64,
}

impl SweepSpec {
    /// {GLOBAL, PARTITIONED} × {EDF, DM} × {preemptive, non-preemptive}.
    pub fn eight_policies() -> Self {
        SweepSpec {
            mappings: vec![MappingScheme::Global, MappingScheme::Partitioned],
            priorities: vec![PriorityAssignment::Edf, PriorityAssignment::Dm],
            preemptive: vec![true, false],
            version_filters: vec![VersionFilter::Both],
            repetitions: 1,
            horizon: None,
            seed: 0,
        }
    }

    /// Points in enumeration order: mapping, priority, preemption, filter.
    pub fn points(&self) -> Result<Vec<SweepPoint>> {
        if self.repetitions == 0 {
            return Err(Error::Config("sweep repetitions must be positive".into()));
        }
        let mut out = Vec::new();
        for &mapping in &self.mappings {
            for &priority in &self.priorities {
                for &preemptive in &self.preemptive {
                    for &filter in &self.version_filters {
                        out.push(SweepPoint {
                            mapping,
                            priority,
                            preemptive,
                            filter,
                        });
                    }
                }
            }
        }
        if out.is_empty() {
            return Err(Error::Config("sweep has no points".into()));
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SweepPoint {
    pub mapping: MappingScheme,
    pub priority: PriorityAssignment,
    pub preemptive: bool,
    pub filter: VersionFilter,
}

impl SweepPoint {
    /// Applies the point to a copy of `doc`.
    pub fn apply(&self, doc: &TaskSetDocument) -> TaskSetDocument {
        let mut d = doc.clone();
        d.config.mapping_scheme = self.mapping;
        d.config.priority_assignment = self.priority;
        d.config.preemptive = self.preemptive;
        d.config.version_filter = self.filter;
        d
    }

    pub fn policy_label(&self) -> String {
        let m = match self.mapping {
            MappingScheme::Global => "G",
            MappingScheme::Partitioned => "P",
            MappingScheme::Offline => "OFF",
        };
        let p = match self.priority {
            PriorityAssignment::Rm => "RM",
            PriorityAssignment::Dm => "DM",
            PriorityAssignment::Edf => "EDF",
            PriorityAssignment::User => "USER",
        };
        format!("{m}-{p}")
    }

    pub fn label(&self) -> String {
        format!(
            "{}_{}_{}",
            self.policy_label(),
            if self.preemptive { "P" } else { "NP" },
            self.filter.label()
        )
    }
}

/// One simulation of the sweep.
#[derive(Clone, Debug)]
pub struct SweepRun {
    pub document: String,
    pub point: SweepPoint,
    pub repetition: u32,
    pub report: RunReport,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub document: String,
    pub policy: String,
    pub preemptive: bool,
    pub version_mode: String,
    pub repetition: u32,
    pub metric: String,
    pub value: f64,
}

impl SweepRun {
    /// Metric rows of this run (one row group).
    pub fn rows(&self) -> Vec<SweepRow> {
        let r = &self.report;
        let mut metrics: Vec<(String, f64)> = vec![
            ("released".into(), r.released as f64),
            ("completed".into(), r.completed as f64),
            ("deadline_misses".into(), r.misses as f64),
            ("miss_ratio".into(), r.miss_ratio),
            ("mean_response_ns".into(), r.mean_response()),
            ("get_task_mean_ns".into(), r.overheads.get_task.mean),
            ("scheduling_mean_ns".into(), r.overheads.scheduling.mean),
            ("worker_lock_wait_max_ns".into(), r.overheads.worker_lock_wait.max as f64),
            ("preemptions".into(), r.overheads.preemptions as f64),
        ];
        for t in &r.tasks {
            metrics.push((format!("task.{}.misses", t.name), t.misses as f64));
            metrics.push((format!("task.{}.max_response_ns", t.name), t.response.max as f64));
        }
        metrics
            .into_iter()
            .map(|(metric, value)| SweepRow {
                document: self.document.clone(),
                policy: self.point.policy_label(),
                preemptive: self.point.preemptive,
                version_mode: self.point.filter.label().into(),
                repetition: self.repetition,
                metric,
                value,
            })
            .collect()
    }
}

/// Runs every point of `spec` on every document. A point that fails to
/// validate aborts the sweep, naming the point.
pub fn run_sweep(docs: &[(String, TaskSetDocument)], spec: &SweepSpec) -> Result<Vec<SweepRun>> {
    let points = spec.points()?;
    let mut runs = Vec::new();
    for (name, doc) in docs {
        let doc = doc.resolved()?;
        for point in &points {
            let ts = point.apply(&doc).compile().map_err(|e| {
                Error::Config(format!("sweep point {} on {name}: {e}", point.label()))
            })?;
            for rep in 0..spec.repetitions {
                let out = run_simulation(&ts, &doc.sim_model, spec.horizon, spec.seed.wrapping_add(rep as u64))
                    .map_err(|e| Error::Config(format!("sweep point {} on {name}: {e}", point.label())))?;
                runs.push(SweepRun {
                    document: name.clone(),
                    point: *point,
                    repetition: rep,
                    report: out.report,
                });
            }
        }
    }
    Ok(runs)
}

pub fn write_sweep_csv<W: Write>(runs: &[SweepRun], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for run in runs {
        for row in run.rows() {
            w.serialize(row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Best (document, point) by fewest total misses, then lowest mean response,
/// aggregated over repetitions. Ties keep enumeration order.
pub fn best_point(runs: &[SweepRun]) -> Option<(String, SweepPoint, u64, f64)> {
    let mut groups: Vec<(String, SweepPoint, u64, f64, u32)> = Vec::new();
    for r in runs {
        match groups
            .iter_mut()
            .find(|g| g.0 == r.document && g.1 == r.point)
        {
            Some(g) => {
                g.2 += r.report.misses;
                g.3 += r.report.mean_response();
                g.4 += 1;
            }
            None => groups.push((r.document.clone(), r.point, r.report.misses, r.report.mean_response(), 1)),
        }
    }
    groups
        .into_iter()
        .map(|(d, p, m, resp, n)| (d, p, m, resp / n as f64))
        .reduce(|best, g| {
            if (g.2, g.3) < (best.2, best.3) {
                g
            } else {
                best
            }
        })
}
