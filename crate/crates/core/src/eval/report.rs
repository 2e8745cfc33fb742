//! Tab-separated and JSON comparison reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;
use serde_json::{json, Value};

use super::{AccuracyReport, System};
use crate::sim::Bucket;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SystemReport {
    pub system: System,
    pub overall: AccuracyReport,
    pub buckets: BTreeMap<Bucket, AccuracyReport>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct Comparison {
    pub rows: Vec<SystemReport>,
}

impl Comparison {
    pub fn row(&self, system: System) -> Option<&SystemReport> {
        self.rows.iter().find(|r| r.system == system)
    }
}

/// `A_c|A_f|A_o` in rounded percent, e.g. `85|87|79`.
pub fn cell(r: &AccuracyReport) -> String {
    let pct = |x: f64| (100.0 * x).round() as i64;
    format!("{}|{}|{}", pct(r.a_c), pct(r.a_f), pct(r.a_o))
}

const HEADER: &str = "system\tgroup\tqueries\tA_c\tA_f\tA_o\tcell\tmacro_P\tmacro_R\tmacro_F1\tmicro_P\tmicro_R\tmicro_F1\tprocessed";

fn line(out: &mut String, system: System, group: &str, r: &AccuracyReport) {
    let _ = writeln!(
        out,
        "{system}\t{group}\t{}\t{:.4}\t{:.4}\t{:.4}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.2}",
        r.queries,
        r.a_c,
        r.a_f,
        r.a_o,
        cell(r),
        r.macro_precision,
        r.macro_recall,
        r.macro_f1,
        r.micro_precision,
        r.micro_recall,
        r.micro_f1,
        r.mean_processed
    );
}

fn hist(h: &[f64; 5]) -> String {
    h.iter().map(|x| format!("{:.0}", 100.0 * x)).collect::<Vec<_>>().join("|")
}

/// One row per system and predictability group, then the overall row
/// labelled `Q`, followed by distribution statistics per system.
pub fn write_tsv(c: &Comparison) -> String {
    let mut out = String::new();
    out.push_str(HEADER);
    out.push('\n');
    for row in &c.rows {
        for (b, r) in &row.buckets {
            line(&mut out, row.system, b.label(), r);
        }
        line(&mut out, row.system, "Q", &row.overall);
    }
    out.push_str("\nsystem\tPr_h\tdelta_Pr\tsigma_r\n");
    for row in &c.rows {
        let d = &row.overall.distribution;
        let _ = writeln!(out, "{}\t{}\t{}\t{}", row.system, hist(&d.pr_h), hist(&d.delta_pr), hist(&d.sigma_r));
    }
    out
}

/// Per system: `cells` maps each group label and `Q` to `A_c|A_f|A_o`;
/// `overall` and `groups` carry the full reports.
pub fn write_json(c: &Comparison) -> Value {
    let systems: serde_json::Map<String, Value> = c
        .rows
        .iter()
        .map(|row| {
            let mut cells: serde_json::Map<String, Value> = row
                .buckets
                .iter()
                .map(|(b, r)| (b.label().to_string(), Value::String(cell(r))))
                .collect();
            cells.insert("Q".into(), Value::String(cell(&row.overall)));
            let groups: serde_json::Map<String, Value> = row
                .buckets
                .iter()
                .map(|(b, r)| (b.label().to_string(), json!(r)))
                .collect();
            (
                row.system.to_string(),
                json!({"cells": cells, "overall": row.overall, "groups": groups}),
            )
        })
        .collect();
    json!({ "systems": systems })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::DistributionStats;

    fn report(a_c: f64, a_f: f64, a_o: f64) -> AccuracyReport {
        AccuracyReport {
            queries: 10,
            q_out: 0,
            q_region: 0,
            q_room: 0,
            a_c,
            a_f,
            a_o,
            macro_precision: 0.0,
            macro_recall: 0.0,
            macro_f1: 0.0,
            micro_precision: 0.0,
            micro_recall: 0.0,
            micro_f1: 0.0,
            mean_processed: 0.0,
            distribution: DistributionStats {
                queries: 0,
                pr_h: [0.0; 5],
                delta_pr: [0.0; 5],
                sigma_r: [0.0; 5],
            },
        }
    }

    #[test]
    fn cells_and_rows() {
        let r = report(0.849, 0.866, 0.79);
        assert_eq!(cell(&r), "85|87|79");
        let c = Comparison {
            rows: vec![SystemReport {
                system: System::DLocater,
                overall: r.clone(),
                buckets: [(Bucket::From85, r)].into(),
            }],
        };
        let tsv = write_tsv(&c);
        assert!(tsv.lines().any(|l| l.starts_with("d-locater\t[85,100]\t10\t")));
        assert!(tsv.lines().any(|l| l.starts_with("d-locater\tQ\t")));
        let j = write_json(&c);
        assert_eq!(j["systems"]["d-locater"]["cells"]["Q"], "85|87|79");
        assert_eq!(write_tsv(&Comparison::default()).lines().count(), 3);
    }
}
