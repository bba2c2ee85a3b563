// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::metrics::{
    class_breakdown, perplexity_metric, self_toxicity, stance_shift, support_stance_score,
    ClassBreakdown, ShiftMode,
};
use super::GenerationSet;
use crate::baselines::RouteRecord;
use crate::corpus::{DialogueExample, Vocab};
use crate::error::{Error, Result};
use crate::tinylm::LmParams;

pub const REPORT_FORMAT: &str = "ctxdetox-report/1";

/// Content hash of an evaluation split.
pub fn split_hash(examples: &[DialogueExample]) -> String {
    let bytes = serde_json::to_vec(examples).expect("examples serialize");
    hex::encode(Sha256::digest(bytes))
}

/// Classifier routing quality over the evaluated examples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingSummary {
    pub n_examples: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub accuracy: f64,
    /// Example ids routed against their context label.
    pub misrouted: Vec<usize>,
}

impl RoutingSummary {
    pub fn from_routes(routes: &[RouteRecord], test: &[DialogueExample]) -> Result<Self> {
        let mut verdicts: BTreeMap<usize, bool> = BTreeMap::new();
        for r in routes {
            if r.example_id >= test.len() {
                return Err(Error::Mismatch(format!(
                    "route for unknown example {}",
                    r.example_id
                )));
            }
            if let Some(prev) = verdicts.insert(r.example_id, r.verdict) {
                if prev != r.verdict {
                    return Err(Error::Mismatch(format!(
                        "example {} routed two ways",
                        r.example_id
                    )));
                }
            }
        }
        if verdicts.is_empty() {
            return Err(Error::Empty("no routing records".into()));
        }
        let (mut fp, mut fneg, mut misrouted) = (0, 0, Vec::new());
        for (&id, &v) in &verdicts {
            match (v, test[id].t_c) {
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                _ => continue,
            }
            misrouted.push(id);
        }
        Ok(Self {
            n_examples: verdicts.len(),
            false_positives: fp,
            false_negatives: fneg,
            accuracy: 1.0 - misrouted.len() as f64 / verdicts.len() as f64,
            misrouted,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format: String,
    pub method: String,
    pub split_hash: String,
    pub n_examples: usize,
    pub n_completions: usize,
    /// Absent for the uncontrolled reference row.
    pub stance_shift_4way: Option<f64>,
    pub stance_shift_3way: Option<f64>,
    pub support_stance: f64,
    pub self_toxicity: f64,
    pub perplexity: f64,
    pub perplexity_skipped: usize,
    pub clean_contexts: ClassBreakdown,
    pub offensive_contexts: ClassBreakdown,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub routing: Option<RoutingSummary>,
    pub manifest: serde_json::Value,
    /// Seconds since the Unix epoch; the only field that differs between
    /// identical runs.
    pub timestamp: u64,
}

#[allow(clippy::too_many_arguments)]
pub fn build_report(
    method: &str,
    test: &[DialogueExample],
    set: &GenerationSet,
    uncontrolled: Option<&GenerationSet>,
    reference: &LmParams,
    vocab: &Vocab,
    routes: &[RouteRecord],
    manifest: serde_json::Value,
) -> Result<EvalReport> {
    let aligned = set.items.len() == test.len()
        && set
            .items
            .iter()
            .zip(test)
            .all(|(i, ex)| i.context == ex.c && i.t_c == ex.t_c);
    if !aligned {
        return Err(Error::Mismatch(format!(
            "generation set {method:?} does not match the test split"
        )));
    }
    let (shift4, shift3) = match uncontrolled {
        Some(u) => (
            Some(stance_shift(set, u, vocab, ShiftMode::FourWay)?),
            Some(stance_shift(set, u, vocab, ShiftMode::ThreeWay)?),
        ),
        None => (None, None),
    };
    let (perplexity, skipped) = perplexity_metric(reference, set, vocab)?;
    let [clean, offensive] = class_breakdown(set, vocab)?;
    let routing = if routes.is_empty() {
        None
    } else {
        Some(RoutingSummary::from_routes(routes, test)?)
    };
    let report = EvalReport {
        format: REPORT_FORMAT.into(),
        method: method.into(),
        split_hash: split_hash(test),
        n_examples: set.items.len(),
        n_completions: set.n_completions(),
        stance_shift_4way: shift4,
        stance_shift_3way: shift3,
        support_stance: support_stance_score(set, vocab)?,
        self_toxicity: self_toxicity(set, vocab)?,
        perplexity,
        perplexity_skipped: skipped,
        clean_contexts: clean,
        offensive_contexts: offensive,
        routing,
        manifest,
        timestamp: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };
    let finite = [
        report.support_stance,
        report.self_toxicity,
        report.perplexity,
    ]
    .iter()
    .chain(shift4.iter())
    .chain(shift3.iter())
    .all(|v| v.is_finite());
    if !finite {
        return Err(Error::NonFinite {
            step: 0,
            detail: format!("report for {method}"),
        });
    }
    Ok(report)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.3}"))
}

impl EvalReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "method: {}", self.method);
        let _ = writeln!(
            s,
            "examples: {}  completions: {}",
            self.n_examples, self.n_completions
        );
        let _ = writeln!(
            s,
            "4-way shift {}  3-way shift {}  support {:.3}  self-tox {:.3}  ppl {:.2} (skipped {})",
            fmt_opt(self.stance_shift_4way),
            fmt_opt(self.stance_shift_3way),
            self.support_stance,
            self.self_toxicity,
            self.perplexity,
            self.perplexity_skipped
        );
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{:<10} {:>5} {:>8} {:>8} {:>8} {:>8} {:>8}",
            "context", "n", "support", "deny", "comment", "query", "toxic"
        );
        for (name, b) in [
            ("clean", &self.clean_contexts),
            ("offensive", &self.offensive_contexts),
        ] {
            let _ = writeln!(
                s,
                "{:<10} {:>5} {:>8.3} {:>8.3} {:>8.3} {:>8.3} {:>8.3}",
                name, b.n_examples, b.support, b.deny, b.comment, b.query, b.toxicity
            );
        }
        if let Some(r) = &self.routing {
            let _ = writeln!(
                s,
                "\nrouting accuracy {:.3} ({} false positives, {} false negatives)",
                r.accuracy, r.false_positives, r.false_negatives
            );
        }
        s
    }

    /// Write `<path>` as JSON and the rendered table next to it as `.txt`.
    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let json = serde_json::to_vec_pretty(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))?;
        let txt = path.with_extension("txt");
        fs::write(&txt, self.render()).map_err(|e| Error::io(&txt, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

/// Reports ordered by 4-way stance shift, rows without a shift first.
#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub rows: Vec<EvalReport>,
}

pub fn compare(reports: &[EvalReport]) -> Result<Comparison> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Empty("no reports to compare".into()))?;
    if let Some(r) = reports.iter().find(|r| r.split_hash != first.split_hash) {
        return Err(Error::Mismatch(format!(
            "{} and {} were evaluated on different splits",
            first.method, r.method
        )));
    }
    let mut rows = reports.to_vec();
    rows.sort_by(|a, b| match (a.stance_shift_4way, b.stance_shift_4way) {
        (None, None) => std::cmp::Ordering::Equal,
        (None, Some(_)) => std::cmp::Ordering::Less,
        (Some(_), None) => std::cmp::Ordering::Greater,
        (Some(x), Some(y)) => x.total_cmp(&y),
    });
    Ok(Comparison { rows })
}

impl Comparison {
    pub fn row(&self, method: &str) -> Option<&EvalReport> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<16} {:>12} {:>12} {:>10} {:>10} {:>8}",
            "method", "4-way shift", "3-way shift", "support", "self-tox", "ppl"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<16} {:>12} {:>12} {:>10.3} {:>10.3} {:>8.2}",
                r.method,
                fmt_opt(r.stance_shift_4way),
                fmt_opt(r.stance_shift_3way),
                r.support_stance,
                r.self_toxicity,
                r.perplexity
            );
        }
        s
    }

    /// One `method,metric,value` row per metric; absent values are empty.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["method", "metric", "value"])?;
        for r in &self.rows {
            let cells = [
                ("stance_shift_4way", r.stance_shift_4way),
                ("stance_shift_3way", r.stance_shift_3way),
                ("support_stance", Some(r.support_stance)),
                ("self_toxicity", Some(r.self_toxicity)),
                ("perplexity", Some(r.perplexity)),
            ];
            for (metric, v) in cells {
                let v = v.map(|x| x.to_string()).unwrap_or_default();
                w.write_record([r.method.as_str(), metric, v.as_str()])?;
            }
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Mismatch(format!("csv buffer: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(method: &str, shift: Option<f64>, hash: &str) -> EvalReport {
        EvalReport {
            format: REPORT_FORMAT.into(),
            method: method.into(),
            split_hash: hash.into(),
            n_examples: 1,
            n_completions: 1,
            stance_shift_4way: shift,
            stance_shift_3way: shift,
            support_stance: 0.2,
            self_toxicity: 0.1,
            perplexity: 9.0,
            perplexity_skipped: 0,
            clean_contexts: ClassBreakdown::default(),
            offensive_contexts: ClassBreakdown::default(),
            routing: None,
            manifest: serde_json::Value::Null,
            timestamp: 0,
        }
    }

    #[test]
    fn comparison_orders_by_shift_with_reference_first() {
        let c = compare(&[
            report("b", Some(0.3), "h"),
            report("ref", None, "h"),
            report("a", Some(0.1), "h"),
        ])
        .unwrap();
        let order: Vec<&str> = c.rows.iter().map(|r| r.method.as_str()).collect();
        assert_eq!(order, ["ref", "a", "b"]);
        let csv = c.to_csv().unwrap();
        assert_eq!(csv.lines().count(), 1 + 3 * 5);
        assert!(csv.contains("ref,stance_shift_4way,\n"));
    }

    #[test]
    fn mixed_splits_are_rejected() {
        assert!(compare(&[report("a", Some(0.1), "h1"), report("b", Some(0.2), "h2")]).is_err());
    }
}
