//! Methods × domains evaluation tables.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::method::MethodName;
use super::report::StreamReport;
use super::{build_stream, run_stream};
use crate::backbone::SegNetwork;
use crate::datagen::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixCell {
    pub method: String,
    pub domain: String,
    pub rater: String,
    pub samples: usize,
    pub r1: f64,
    pub rstar: f64,
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodAverage {
    pub method: String,
    pub r1: f64,
    pub rstar: f64,
    pub combined: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixReport {
    pub seed: u64,
    pub cells: Vec<MatrixCell>,
    pub averages: Vec<MethodAverage>,
    pub streams: Vec<StreamReport>,
}

/// Precision of every number written to the tables.
pub const TABLE_DECIMALS: usize = 6;

impl MatrixReport {
    /// Tables for already evaluated streams, in the given order.
    pub fn from_streams(seed: u64, streams: Vec<StreamReport>) -> Self {
        let mut cells = Vec::new();
        let mut averages = Vec::new();
        for report in &streams {
            for agg in &report.domains {
                cells.push(MatrixCell {
                    method: report.method.clone(),
                    domain: agg.domain.clone(),
                    rater: agg.rater.clone(),
                    samples: agg.samples,
                    r1: agg.r1.mean,
                    rstar: agg.rstar.mean,
                    skipped: None,
                });
            }
            let (r1, rstar) = report.domain_means();
            averages.push(MethodAverage {
                method: report.method.clone(),
                r1,
                rstar,
                combined: (r1 + rstar) / 2.0,
            });
        }
        Self {
            seed,
            cells,
            averages,
            streams,
        }
    }

    pub fn average(&self, method: MethodName) -> Option<&MethodAverage> {
        self.averages.iter().find(|a| a.method == method.as_str())
    }

    pub fn stream(&self, method: MethodName) -> Option<&StreamReport> {
        self.streams.iter().find(|s| s.method == method.as_str())
    }

    pub fn to_csv(&self) -> String {
        let num = |v: f64| format!("{v:.prec$}", prec = TABLE_DECIMALS);
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut rows = vec![["method", "domain", "rater", "samples", "dsc_r1", "dsc_rstar", "skipped"].map(String::from)];
        for c in &self.cells {
            rows.push([
                c.method.clone(),
                c.domain.clone(),
                c.rater.clone(),
                c.samples.to_string(),
                num(c.r1),
                num(c.rstar),
                c.skipped.clone().unwrap_or_default(),
            ]);
        }
        for a in &self.averages {
            rows.push([
                a.method.clone(),
                "average".into(),
                String::new(),
                String::new(),
                num(a.r1),
                num(a.rstar),
                String::new(),
            ]);
        }
        for r in rows {
            w.write_record(&r).expect("writing to memory");
        }
        String::from_utf8(w.into_inner().expect("writing to memory")).expect("utf-8 fields")
    }

    /// Machine-readable table (cells and averages, no per-sample rows).
    pub fn table_json(&self) -> String {
        #[derive(Serialize)]
        struct Table<'a> {
            seed: u64,
            cells: &'a [MatrixCell],
            averages: &'a [MethodAverage],
        }
        let round = |v: f64| format!("{v:.TABLE_DECIMALS$}").parse::<f64>().unwrap_or(v);
        let cells: Vec<MatrixCell> = self
            .cells
            .iter()
            .map(|c| MatrixCell {
                r1: round(c.r1),
                rstar: round(c.rstar),
                ..c.clone()
            })
            .collect();
        let averages: Vec<MethodAverage> = self
            .averages
            .iter()
            .map(|a| MethodAverage {
                r1: round(a.r1),
                rstar: round(a.rstar),
                combined: round(a.combined),
                ..a.clone()
            })
            .collect();
        serde_json::to_string_pretty(&Table {
            seed: self.seed,
            cells: &cells,
            averages: &averages,
        })
        .expect("table serializes")
    }

    /// Human-readable summary: one row per method, one column pair per domain.
    pub fn summary(&self) -> String {
        let mut domains: Vec<(&str, &str)> = Vec::new();
        for c in &self.cells {
            if !domains.iter().any(|(d, _)| *d == c.domain) {
                domains.push((&c.domain, &c.rater));
            }
        }
        let mut out = String::from("| method |");
        for (d, r) in &domains {
            let _ = write!(out, " {d} vs R1 | {d} vs {r} |");
        }
        out.push_str(" mean vs R1 | mean vs R* |\n|---|");
        for _ in 0..domains.len() * 2 + 2 {
            out.push_str("---|");
        }
        out.push('\n');
        for a in &self.averages {
            let _ = write!(out, "| {} |", a.method);
            for (d, _) in &domains {
                match self.cells.iter().find(|c| c.method == a.method && c.domain == *d) {
                    Some(c) if c.skipped.is_none() => {
                        let _ = write!(out, " {:.2} | {:.2} |", 100.0 * c.r1, 100.0 * c.rstar);
                    }
                    _ => out.push_str(" - | - |"),
                }
            }
            let _ = writeln!(out, " {:.2} | {:.2} |", 100.0 * a.r1, 100.0 * a.rstar);
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = [
            ("table.csv", self.to_csv()),
            ("table.json", self.table_json()),
            ("summary.md", self.summary()),
            (
                "streams.json",
                serde_json::to_string(&self.streams).map_err(|e| Error::format("report", e))?,
            ),
        ];
        for (name, text) in files {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Evaluates every configured method on the configured target domains.
/// When the source model is unavailable every cell is recorded as skipped.
pub fn run_matrix(cfg: &RunConfig, data: &Dataset, source: Result<&SegNetwork>) -> Result<MatrixReport> {
    cfg.validate()?;
    let domains = cfg.target_domains();
    let mut skipped = Vec::new();
    let mut streams = Vec::new();
    for &method in &cfg.methods {
        let spec = cfg.spec(method)?;
        let net = match &source {
            Ok(n) => (*n).clone(),
            Err(e) => {
                for d in &domains {
                    skipped.push(MatrixCell {
                        method: method.to_string(),
                        domain: d.clone(),
                        rater: data.rater_of(d)?.to_string(),
                        samples: 0,
                        r1: f64::NAN,
                        rstar: f64::NAN,
                        skipped: Some(format!("source model unavailable: {e}")),
                    });
                }
                continue;
            }
        };
        let report = if cfg.reset_per_domain {
            let mut parts = Vec::new();
            for d in &domains {
                let items = build_stream(data, std::slice::from_ref(d), cfg.seed, cfg.shuffle)?;
                parts.push(run_stream(&spec, net.clone(), items, cfg.seed)?.0);
            }
            let fp = super::session::fingerprint(&spec, cfg.seed);
            StreamReport::merge(method.as_str(), &fp, cfg.seed, parts)
        } else {
            let items = build_stream(data, &domains, cfg.seed, cfg.shuffle)?;
            run_stream(&spec, net, items, cfg.seed)?.0
        };
        tracing::info!(%method, r1 = report.mean_r1, rstar = report.mean_rstar, "stream finished");
        streams.push(report);
    }
    let mut out = MatrixReport::from_streams(cfg.seed, streams);
    skipped.extend(out.cells);
    out.cells = skipped;
    Ok(out)
}
