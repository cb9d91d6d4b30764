//! Leaderboard export: composite scores per (dataset, model) group as CSV,
//! JSON and a static HTML table.
//!
//! CSV columns, in order:
//!
//! | column | meaning |
//! |---|---|
//! | `dataset`, `model` | group key |
//! | `rank` | 1-based rank within the group |
//! | `method` | training method tag |
//! | `score` | weighted composite score |
//! | `config_hash`, `seed` | run identity |
//! | `clean_accuracy` | test accuracy without perturbation |
//! | `robust_accuracy` | minimum accuracy over the evaluated attacks |
//! | `pr_mean` | mean PR over evaluated radii and families |
//! | `prob_acc_mean` | mean ProbAcc over evaluated (ρ, radius) pairs |
//! | `ge_ar` | train − test adversarial accuracy |
//! | `ge_pr_mean` | mean train − test PR |
//! | `seconds_per_epoch` | training cost |
//!
//! Empty cells mean the metric was not measured.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::{read_report, REPORT_FILE};
use crate::metrics::{composite_score, ScoreInput};
use crate::report::EvalReport;

/// Metric families a weight applies to; every column of a family gets
/// that family's weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Accuracy,
    Ar,
    Pr,
    ProbAcc,
    Ge,
    Time,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::Accuracy,
        Family::Ar,
        Family::Pr,
        Family::ProbAcc,
        Family::Ge,
        Family::Time,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Family::Accuracy => "accuracy",
            Family::Ar => "ar",
            Family::Pr => "pr",
            Family::ProbAcc => "prob_acc",
            Family::Ge => "ge",
            Family::Time => "time",
        }
    }

    pub fn lower_is_better(&self) -> bool {
        matches!(self, Family::Ge | Family::Time)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Weights([f64; 6]);

impl Default for Weights {
    fn default() -> Self {
        Weights([1.0; 6])
    }
}

impl Weights {
    pub fn get(&self, f: Family) -> f64 {
        self.0[f as usize]
    }

    /// Parses `a,b,c,d,e,f` (family order: accuracy, ar, pr, prob_acc, ge,
    /// time) or `name=value` pairs, unnamed families defaulting to 1.
    pub fn parse(s: &str) -> Result<Self> {
        let bad = |m: String| Error::InvalidArgument(format!("weights {s:?}: {m}"));
        let parts: Vec<&str> = s.split(',').map(str::trim).filter(|p| !p.is_empty()).collect();
        let num = |p: &str| -> Result<f64> {
            p.parse::<f64>()
                .ok()
                .filter(|w| *w >= 0.0 && w.is_finite())
                .ok_or_else(|| bad(format!("{p:?} is not a nonnegative number")))
        };
        let mut w = [1.0; 6];
        if parts.iter().all(|p| p.contains('=')) {
            for p in parts {
                let (k, v) = p.split_once('=').unwrap();
                let f = Family::ALL
                    .into_iter()
                    .find(|f| f.as_str() == k.trim())
                    .ok_or_else(|| bad(format!("unknown family {k:?}")))?;
                w[f as usize] = num(v.trim())?;
            }
        } else if parts.len() == 6 {
            for (slot, p) in w.iter_mut().zip(parts) {
                *slot = num(p)?;
            }
        } else {
            return Err(bad("expected 6 comma-separated numbers or family=value pairs".into()));
        }
        if w.iter().all(|&x| x == 0.0) {
            return Err(bad("all weights are zero".into()));
        }
        Ok(Weights(w))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Column {
    pub family: Family,
    pub name: String,
}

impl Column {
    fn new(family: Family, name: impl Into<String>) -> Self {
        Self {
            family,
            name: name.into(),
        }
    }
}

/// Every scored metric of one report.
pub fn report_columns(r: &EvalReport) -> BTreeMap<Column, Option<f64>> {
    let mut m = BTreeMap::new();
    m.insert(Column::new(Family::Accuracy, "clean"), Some(r.clean_accuracy));
    for a in &r.adversarial {
        m.insert(Column::new(Family::Ar, &a.name), Some(a.accuracy));
    }
    for p in &r.pr {
        m.insert(
            Column::new(Family::Pr, format!("{}@{}", p.family.as_str(), p.radius)),
            p.rate,
        );
    }
    for p in &r.prob_acc {
        let name = format!("{}@{}/rho={}", p.family.as_str(), p.radius, p.rho);
        m.insert(Column::new(Family::ProbAcc, name), p.rate);
    }
    for g in r.ge.iter().filter(|g| g.metric != "clean") {
        m.insert(Column::new(Family::Ge, &g.metric), g.value);
    }
    m.insert(Column::new(Family::Time, "seconds_per_epoch"), r.seconds_per_epoch);
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardRow {
    pub method: String,
    pub model: String,
    pub dataset: String,
    pub config_hash: String,
    pub seed: u64,
    pub score: f64,
    pub rank: usize,
    /// Values aligned with the group's `columns`.
    pub values: Vec<Option<f64>>,
    pub summary: Summary,
}

/// The fixed CSV metric columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub clean_accuracy: f64,
    pub robust_accuracy: Option<f64>,
    pub pr_mean: Option<f64>,
    pub prob_acc_mean: Option<f64>,
    pub ge_ar: Option<f64>,
    pub ge_pr_mean: Option<f64>,
    pub seconds_per_epoch: Option<f64>,
}

fn mean(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let xs: Vec<f64> = v.flatten().collect();
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

impl Summary {
    pub fn of(r: &EvalReport) -> Self {
        Self {
            clean_accuracy: r.clean_accuracy,
            robust_accuracy: r.adversarial.iter().map(|a| a.accuracy).reduce(f64::min),
            pr_mean: mean(r.pr.iter().map(|p| p.rate)),
            prob_acc_mean: mean(r.prob_acc.iter().map(|p| p.rate)),
            ge_ar: r.ge_ar(),
            ge_pr_mean: mean(r.ge.iter().filter(|g| g.metric.starts_with("pr:")).map(|g| g.value)),
            seconds_per_epoch: r.seconds_per_epoch,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub dataset: String,
    pub model: String,
    pub columns: Vec<Column>,
    pub rows: Vec<LeaderboardRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Leaderboard {
    pub weights: Weights,
    pub groups: Vec<Group>,
    /// `dataset/model` groups left out for having a single report.
    pub skipped: Vec<String>,
}

/// Scores `reports` per (dataset, model) group.
pub fn build_leaderboard(reports: &[EvalReport], weights: &Weights) -> Result<Leaderboard> {
    if reports.is_empty() {
        return Err(Error::Report("no reports to rank".into()));
    }
    let mut grouped: BTreeMap<(String, String), Vec<&EvalReport>> = BTreeMap::new();
    for r in reports {
        grouped.entry((r.dataset.clone(), r.model.clone())).or_default().push(r);
    }
    let mut groups = Vec::new();
    let mut skipped = Vec::new();
    for ((dataset, model), members) in grouped {
        if members.len() < 2 {
            log::warn!("group {dataset}/{model} has a single report; skipped");
            skipped.push(format!("{dataset}/{model}"));
            continue;
        }
        let per: Vec<_> = members.iter().map(|r| report_columns(r)).collect();
        let mut columns: Vec<Column> = per.iter().flat_map(|m| m.keys().cloned()).collect();
        columns.sort();
        columns.dedup();
        let tag = |r: &EvalReport| {
            let dup = members.iter().filter(|o| o.method == r.method).count() > 1;
            if dup {
                format!("{}:{}", r.method, r.config_hash)
            } else {
                r.method.clone()
            }
        };
        let inputs: Vec<ScoreInput> = members
            .iter()
            .zip(&per)
            .map(|(r, m)| ScoreInput {
                tag: tag(r),
                values: columns.iter().map(|c| m.get(c).copied().flatten()).collect(),
            })
            .collect();
        let w: Vec<f64> = columns.iter().map(|c| weights.get(c.family)).collect();
        let flags: Vec<bool> = columns.iter().map(|c| c.family.lower_is_better()).collect();
        let scored = composite_score(&inputs, &w, &flags)?;
        let rows = scored
            .into_iter()
            .map(|s| {
                let i = inputs
                    .iter()
                    .position(|inp| inp.tag == s.tag)
                    .expect("scored tag comes from inputs");
                let r = members[i];
                LeaderboardRow {
                    method: r.method.clone(),
                    model: r.model.clone(),
                    dataset: r.dataset.clone(),
                    config_hash: r.config_hash.clone(),
                    seed: r.seed,
                    score: s.score,
                    rank: s.rank,
                    values: inputs[i].values.clone(),
                    summary: Summary::of(r),
                }
            })
            .collect();
        groups.push(Group {
            dataset,
            model,
            columns,
            rows,
        });
    }
    Ok(Leaderboard {
        weights: *weights,
        groups,
        skipped,
    })
}

/// Finds every `report.json` below `dir` (any depth).
pub fn collect_reports(dir: &Path) -> Result<Vec<EvalReport>> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        let mut entries: Vec<_> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(&p, out)?;
            } else if p.file_name().is_some_and(|n| n == REPORT_FILE) {
                out.push(p);
            }
        }
        Ok(())
    }
    let mut paths = Vec::new();
    walk(dir, &mut paths)?;
    if paths.is_empty() {
        return Err(Error::Report(format!("no {REPORT_FILE} found under {}", dir.display())));
    }
    paths.iter().map(|p| read_report(p)).collect()
}

pub const CSV_HEADER: [&str; 14] = [
    "dataset",
    "model",
    "rank",
    "method",
    "score",
    "config_hash",
    "seed",
    "clean_accuracy",
    "robust_accuracy",
    "pr_mean",
    "prob_acc_mean",
    "ge_ar",
    "ge_pr_mean",
    "seconds_per_epoch",
];

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl Leaderboard {
    pub fn rows(&self) -> impl Iterator<Item = &LeaderboardRow> {
        self.groups.iter().flat_map(|g| g.rows.iter())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_HEADER)?;
        for r in self.rows() {
            let s = &r.summary;
            w.write_record([
                r.dataset.clone(),
                r.model.clone(),
                r.rank.to_string(),
                r.method.clone(),
                r.score.to_string(),
                r.config_hash.clone(),
                r.seed.to_string(),
                s.clean_accuracy.to_string(),
                cell(s.robust_accuracy),
                cell(s.pr_mean),
                cell(s.prob_acc_mean),
                cell(s.ge_ar),
                cell(s.ge_pr_mean),
                cell(s.seconds_per_epoch),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Report(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Report(e.to_string()))
    }

    pub fn to_html(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "&ndash;".into());
        let mut h = String::from(
            "<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n<title>Robustness leaderboard</title>\n\
             <style>body{font-family:sans-serif;margin:2em}table{border-collapse:collapse}\
             th,td{border:1px solid #bbb;padding:4px 8px;text-align:right}th{background:#eee}\
             td.t{text-align:left}</style>\n</head>\n<body>\n<h1>Robustness leaderboard</h1>\n",
        );
        let _ = writeln!(
            h,
            "<p>Rows are ordered by rank within each dataset/model group. Weights: {}.</p>",
            Family::ALL
                .iter()
                .map(|f| format!("{}={}", f.as_str(), self.weights.get(*f)))
                .collect::<Vec<_>>()
                .join(", ")
        );
        h.push_str("<table>\n<thead><tr>");
        for c in CSV_HEADER {
            let _ = write!(h, "<th>{c}</th>");
        }
        h.push_str("</tr></thead>\n<tbody>\n");
        for r in self.rows() {
            let s = &r.summary;
            let _ = write!(
                h,
                "<tr><td class=\"t\">{}</td><td class=\"t\">{}</td><td>{}</td><td class=\"t\">{}</td><td>{:.4}</td>\
                 <td class=\"t\">{}</td><td>{}</td>",
                escape(&r.dataset),
                escape(&r.model),
                r.rank,
                escape(&r.method),
                r.score,
                escape(&r.config_hash),
                r.seed
            );
            for v in [
                Some(s.clean_accuracy),
                s.robust_accuracy,
                s.pr_mean,
                s.prob_acc_mean,
                s.ge_ar,
                s.ge_pr_mean,
                s.seconds_per_epoch,
            ] {
                let _ = write!(h, "<td>{}</td>", fmt(v));
            }
            h.push_str("</tr>\n");
        }
        h.push_str("</tbody>\n</table>\n");
        if !self.skipped.is_empty() {
            let _ = writeln!(
                h,
                "<p>Skipped (single report): {}</p>",
                self.skipped.iter().map(|s| escape(s)).collect::<Vec<_>>().join(", ")
            );
        }
        h.push_str("</body>\n</html>\n");
        h
    }

    /// Writes `<out>.csv`, `<out>.json` and `<out>.html`; returns the paths.
    pub fn write(&self, out: &Path) -> Result<[PathBuf; 3]> {
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let paths = [
            out.with_extension("csv"),
            out.with_extension("json"),
            out.with_extension("html"),
        ];
        let contents = [
            self.to_csv()?,
            serde_json::to_string_pretty(self)? + "\n",
            self.to_html(),
        ];
        for (p, c) in paths.iter().zip(contents) {
            fs::write(p, c).map_err(|e| Error::io(p, e))?;
        }
        Ok(paths)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Collects reports under `dir`, scores them and writes the three exports.
pub fn export_leaderboard(dir: &Path, weights: &Weights, out: &Path) -> Result<Leaderboard> {
    let reports = collect_reports(dir)?;
    let board = build_leaderboard(&reports, weights)?;
    board.write(out)?;
    Ok(board)
}
