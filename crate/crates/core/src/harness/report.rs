//! Per-sample rows and aggregates of one evaluated stream.

use serde::{Deserialize, Serialize};

use crate::feedback_adapt::HeadTag;
use crate::mask::RleMask;
use crate::objectives::DscScores;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub index: usize,
    pub sample_id: String,
    pub domain: String,
    pub rater: String,
    pub chosen: HeadTag,
    pub dsc_r1: DscScores,
    pub dsc_rstar: DscScores,
    pub pre_loss: Vec<f64>,
    pub post_loss: Vec<f64>,
    pub mdiv_mean: f64,
    pub failed: bool,
    pub prediction: RleMask,
    pub model_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainAggregate {
    pub domain: String,
    pub rater: String,
    pub samples: usize,
    pub failed: usize,
    pub r1: DscScores,
    pub rstar: DscScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamReport {
    pub method: String,
    pub fingerprint: String,
    pub seed: u64,
    pub rows: Vec<SampleRow>,
    pub domains: Vec<DomainAggregate>,
    pub mean_r1: f64,
    pub mean_rstar: f64,
}

fn mean_scores<'a>(it: impl Iterator<Item = &'a DscScores>) -> DscScores {
    let (mut od, mut oc, mut mean, mut n) = (0.0, 0.0, 0.0, 0usize);
    for s in it {
        od += s.od;
        oc += s.oc;
        mean += s.mean;
        n += 1;
    }
    let d = n.max(1) as f64;
    DscScores {
        od: od / d,
        oc: oc / d,
        mean: mean / d,
    }
}

impl StreamReport {
    pub fn new(method: &str, fingerprint: &str, seed: u64) -> Self {
        Self {
            method: method.to_string(),
            fingerprint: fingerprint.to_string(),
            seed,
            rows: Vec::new(),
            domains: Vec::new(),
            mean_r1: 0.0,
            mean_rstar: 0.0,
        }
    }

    pub fn push(&mut self, row: SampleRow) {
        self.rows.push(row);
        self.recompute();
    }

    /// Rebuilds every aggregate from the rows. Domains keep first-seen order.
    pub fn recompute(&mut self) {
        let mut names: Vec<(String, String)> = Vec::new();
        for r in &self.rows {
            if !names.iter().any(|(d, _)| d == &r.domain) {
                names.push((r.domain.clone(), r.rater.clone()));
            }
        }
        self.domains = names
            .into_iter()
            .map(|(domain, rater)| {
                let rows: Vec<&SampleRow> = self.rows.iter().filter(|r| r.domain == domain).collect();
                DomainAggregate {
                    samples: rows.len(),
                    failed: rows.iter().filter(|r| r.failed).count(),
                    r1: mean_scores(rows.iter().map(|r| &r.dsc_r1)),
                    rstar: mean_scores(rows.iter().map(|r| &r.dsc_rstar)),
                    domain,
                    rater,
                }
            })
            .collect();
        let n = self.rows.len().max(1) as f64;
        self.mean_r1 = self.rows.iter().map(|r| r.dsc_r1.mean).sum::<f64>() / n;
        self.mean_rstar = self.rows.iter().map(|r| r.dsc_rstar.mean).sum::<f64>() / n;
    }

    /// Mean of the per-domain means (the table convention), vs R1 and vs R*.
    pub fn domain_means(&self) -> (f64, f64) {
        let n = self.domains.len().max(1) as f64;
        (
            self.domains.iter().map(|d| d.r1.mean).sum::<f64>() / n,
            self.domains.iter().map(|d| d.rstar.mean).sum::<f64>() / n,
        )
    }

    pub fn merge(method: &str, fingerprint: &str, seed: u64, parts: Vec<StreamReport>) -> Self {
        let mut out = Self::new(method, fingerprint, seed);
        for p in parts {
            for mut r in p.rows {
                r.index = out.rows.len();
                out.rows.push(r);
            }
        }
        out.recompute();
        out
    }
}
