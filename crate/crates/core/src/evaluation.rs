//! Full-catalog ranking metrics.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{self, Batch, ModelConfig, ParamSet};

pub const CUTOFFS: [usize; 2] = [10, 20];

/// Rank of `target` among `logits`, where column `j` is item `j + 1`.
///
/// Counts every non-excluded item with a strictly greater score, plus equal
/// scores at a lower index.
pub fn rank_of_target(logits: &[f64], target: usize, excluded: &[usize]) -> Result<usize> {
    if target == 0 || target > logits.len() {
        return Err(Error::TargetOutOfRange {
            target,
            n_items: logits.len(),
        });
    }
    if excluded.contains(&target) {
        return Err(Error::Invalid(format!("target {target} is excluded from ranking")));
    }
    let t = target - 1;
    let s = logits[t];
    let mut ahead = 0;
    for (j, &v) in logits.iter().enumerate() {
        if v > s || (v == s && j < t) {
            ahead += 1;
        }
    }
    // exclusions are few; subtract the ones that were counted
    let mut seen = Vec::with_capacity(excluded.len());
    for &e in excluded {
        if e == 0 || e > logits.len() || seen.contains(&e) {
            continue;
        }
        seen.push(e);
        let v = logits[e - 1];
        if v > s || (v == s && e - 1 < t) {
            ahead -= 1;
        }
    }
    Ok(ahead + 1)
}

/// `(recall, mrr, ndcg)` of a single rank at cutoff `k`.
pub fn metrics_at_k(rank: usize, k: usize) -> (f64, f64, f64) {
    if rank >= 1 && rank <= k {
        (1.0, 1.0 / rank as f64, 1.0 / (rank as f64 + 1.0).log2())
    } else {
        (0.0, 0.0, 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AtK {
    pub k: usize,
    pub recall: f64,
    pub mrr: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub stage: usize,
    pub n_cases: usize,
    pub at: Vec<AtK>,
}

impl MetricsReport {
    /// Means over the given ranks.
    pub fn from_ranks(stage: usize, ranks: &[usize]) -> Result<Self> {
        if ranks.is_empty() {
            return Err(Error::NoTestCases);
        }
        let n = ranks.len() as f64;
        let at = CUTOFFS
            .iter()
            .map(|&k| {
                let (mut r, mut m, mut g) = (0.0, 0.0, 0.0);
                for &rank in ranks {
                    let (a, b, c) = metrics_at_k(rank, k);
                    r += a;
                    m += b;
                    g += c;
                }
                AtK {
                    k,
                    recall: r / n,
                    mrr: m / n,
                    ndcg: g / n,
                }
            })
            .collect();
        Ok(Self {
            stage,
            n_cases: ranks.len(),
            at,
        })
    }

    pub fn at(&self, k: usize) -> Option<&AtK> {
        self.at.iter().find(|a| a.k == k)
    }

    pub fn recall20(&self) -> f64 {
        self.at(20).map_or(0.0, |a| a.recall)
    }

    /// MRR@10, Recall@10, NDCG@10, MRR@20, Recall@20, NDCG@20.
    pub fn columns(&self) -> [f64; 6] {
        let a = self.at(10).copied().unwrap_or(AtK { k: 10, recall: 0.0, mrr: 0.0, ndcg: 0.0 });
        let b = self.at(20).copied().unwrap_or(AtK { k: 20, recall: 0.0, mrr: 0.0, ndcg: 0.0 });
        [a.mrr, a.recall, a.ndcg, b.mrr, b.recall, b.ndcg]
    }
}

pub const METRIC_COLUMNS: [&str; 6] = ["mrr@10", "recall@10", "ndcg@10", "mrr@20", "recall@20", "ndcg@20"];

/// One row of a metrics table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub label: String,
    pub report: MetricsReport,
}

pub fn write_metrics_csv<W: Write>(out: W, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["strategy", "stage", "n_cases"];
    header.extend(METRIC_COLUMNS);
    w.write_record(&header)?;
    for row in rows {
        let mut rec = vec![row.label.clone(), row.report.stage.to_string(), row.report.n_cases.to_string()];
        rec.extend(row.report.columns().iter().map(|v| format!("{v:.6}")));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("metrics.csv", e))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Remove items already in the prefix from the candidate list.
    pub exclude_prefix_items: bool,
    pub batch_size: usize,
}

/// Ranks for each sample under `params`, evaluated in eval mode.
pub fn rank_samples(params: &ParamSet, cfg: &ModelConfig, samples: &[Sample], opts: EvalOptions) -> Result<Vec<usize>> {
    let bs = if opts.batch_size == 0 { 256 } else { opts.batch_size };
    let mut ranks = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(bs) {
        let batch = Batch::from_prefixes(chunk.iter().map(|s| s.prefix.as_slice()), cfg.max_seq_len)?;
        let logits = model::logits(params, cfg, &batch)?;
        for (i, s) in chunk.iter().enumerate() {
            let excluded: Vec<usize> = if opts.exclude_prefix_items {
                s.prefix.iter().copied().filter(|&it| it != s.target).collect()
            } else {
                Vec::new()
            };
            ranks.push(rank_of_target(logits.row(i), s.target, &excluded)?);
        }
    }
    Ok(ranks)
}

pub fn evaluate_stage(stage: usize, params: &ParamSet, cfg: &ModelConfig, samples: &[Sample], opts: EvalOptions) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::NoTestCases);
    }
    MetricsReport::from_ranks(stage, &rank_samples(params, cfg, samples, opts)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_examples() {
        assert_eq!(rank_of_target(&[0.1, 0.9, 0.3], 2, &[]).unwrap(), 1);
        // all tied: columns 0 and 1 precede column 2
        assert_eq!(rank_of_target(&[1.0; 5], 3, &[]).unwrap(), 3);
        assert_eq!(rank_of_target(&[1.0; 5], 3, &[1]).unwrap(), 2);
        assert_eq!(rank_of_target(&[5.0, 1.0, 2.0], 2, &[1, 1]).unwrap(), 2);
        assert!(rank_of_target(&[1.0; 5], 3, &[3]).is_err());
        assert!(rank_of_target(&[1.0; 5], 0, &[]).is_err());
        assert!(rank_of_target(&[1.0; 5], 6, &[]).is_err());
    }

    #[test]
    fn metric_examples() {
        assert_eq!(metrics_at_k(1, 10), (1.0, 1.0, 1.0));
        let (r, m, n) = metrics_at_k(3, 10);
        assert_eq!(r, 1.0);
        assert!((m - 1.0 / 3.0).abs() < 1e-15);
        assert!((n - 0.5).abs() < 1e-15);
        assert_eq!(metrics_at_k(11, 10), (0.0, 0.0, 0.0));
    }

    #[test]
    fn report_examples() {
        let r = MetricsReport::from_ranks(0, &[1]).unwrap();
        assert_eq!(r.columns(), [1.0; 6]);
        let r = MetricsReport::from_ranks(0, &[1, 21]).unwrap();
        let a = r.at(20).unwrap();
        assert_eq!((a.recall, a.mrr, a.ndcg), (0.5, 0.5, 0.5));
        assert!(matches!(MetricsReport::from_ranks(0, &[]), Err(Error::NoTestCases)));
    }

    #[test]
    fn csv_layout() {
        let rows = vec![MetricsRow {
            label: "finetune".into(),
            report: MetricsReport::from_ranks(1, &[1, 3]).unwrap(),
        }];
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "strategy,stage,n_cases,mrr@10,recall@10,ndcg@10,mrr@20,recall@20,ndcg@20");
        assert_eq!(lines.next().unwrap(), "finetune,1,2,0.666667,1.000000,0.750000,0.666667,1.000000,0.750000");
    }
}
