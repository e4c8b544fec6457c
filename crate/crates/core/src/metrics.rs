//! Misclassification-detection metrics.
//!
//! Orientation: AUROC and AUPR treat *miss* as the positive class and score
//! samples by `p_miss`; FPR95 treats *hit* as the positive class, thresholds
//! `p_hit` and reports the fraction of misses accepted as hits.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hitmiss::HitMissDataset;
use crate::prober::{Prober, ProberOutput};

pub const ORIENTATION_NOTE: &str =
    "AUROC/AUPR: miss positive, score p_miss; FPR95: hit positive, threshold on p_hit";

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredLabels {
    /// `p_miss` per sample.
    pub score: Vec<f64>,
    pub is_miss: Vec<bool>,
}

impl ScoredLabels {
    pub fn new(score: Vec<f64>, is_miss: Vec<bool>) -> Result<Self> {
        if score.len() != is_miss.len() {
            return Err(Error::shape(score.len(), is_miss.len()));
        }
        if let Some(bad) = score.iter().find(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("score {bad}")));
        }
        Ok(Self { score, is_miss })
    }

    pub fn from_outputs(outputs: &[ProberOutput], dp: &HitMissDataset) -> Result<Self> {
        if outputs.len() != dp.len() {
            return Err(Error::shape(dp.len(), outputs.len()));
        }
        Self::new(
            outputs.iter().map(ProberOutput::p_miss).collect(),
            dp.records.iter().map(|r| !r.hit).collect(),
        )
    }

    pub fn misses(&self) -> usize {
        self.is_miss.iter().filter(|&&m| m).count()
    }

    pub fn hits(&self) -> usize {
        self.is_miss.len() - self.misses()
    }

    fn require_both(&self) -> Result<(usize, usize)> {
        let (m, h) = (self.misses(), self.hits());
        if m == 0 || h == 0 {
            return Err(Error::OneClassOnly {
                positives: m,
                negatives: h,
            });
        }
        Ok((m, h))
    }

    /// Indices grouped by equal score, groups in descending score order.
    fn descending_groups(&self) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..self.score.len()).collect();
        idx.sort_by(|&a, &b| self.score[b].total_cmp(&self.score[a]));
        let mut groups: Vec<Vec<usize>> = Vec::new();
        for i in idx {
            match groups.last_mut() {
                Some(g) if self.score[g[0]] == self.score[i] => g.push(i),
                _ => groups.push(vec![i]),
            }
        }
        groups
    }
}

/// `P(score_miss > score_hit) + ½ P(tie)` over all miss/hit pairs.
pub fn auroc(s: &ScoredLabels) -> Result<f64> {
    let (m, h) = s.require_both()?;
    // Sweep ascending; twice the credit keeps everything in integers.
    let mut credit2: u64 = 0;
    let mut hits_below: u64 = 0;
    for group in s.descending_groups().into_iter().rev() {
        let gm = group.iter().filter(|&&i| s.is_miss[i]).count() as u64;
        let gh = group.len() as u64 - gm;
        credit2 += gm * (2 * hits_below + gh);
        hits_below += gh;
    }
    Ok(credit2 as f64 / (2 * m as u64 * h as u64) as f64)
}

/// `Σ (R_i − R_{i−1}) P_i` over a descending sweep, tied scores forming one step.
pub fn aupr(s: &ScoredLabels) -> Result<f64> {
    let m = s.misses();
    if m == 0 {
        return Err(Error::OneClassOnly {
            positives: 0,
            negatives: s.hits(),
        });
    }
    let (mut tp, mut seen, mut area, mut prev_recall) = (0usize, 0usize, 0.0, 0.0);
    for group in s.descending_groups() {
        tp += group.iter().filter(|&&i| s.is_miss[i]).count();
        seen += group.len();
        let recall = tp as f64 / m as f64;
        area += (recall - prev_recall) * (tp as f64 / seen as f64);
        prev_recall = recall;
    }
    Ok(area)
}

/// Fraction of misses whose `p_hit` reaches the largest threshold at which at
/// least 95% of hits are accepted.
pub fn fpr_at_95_tpr(s: &ScoredLabels) -> Result<f64> {
    let (m, h) = s.require_both()?;
    // Ascending p_miss is descending p_hit; work on p_miss to avoid rounding 1 − p.
    let (mut tp, mut fp) = (0usize, 0usize);
    for group in s.descending_groups().into_iter().rev() {
        let gm = group.iter().filter(|&&i| s.is_miss[i]).count();
        fp += gm;
        tp += group.len() - gm;
        if 100 * tp >= 95 * h {
            return Ok(fp as f64 / m as f64);
        }
    }
    unreachable!("accepting every sample reaches full TPR")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    /// Percentages; `None` when the metric is undefined for the data.
    pub aupr: Option<f64>,
    pub auroc: Option<f64>,
    pub fpr95: Option<f64>,
    pub acc: f64,
    pub hits: usize,
    pub misses: usize,
    /// `#hit / #miss`; infinite without misses.
    pub ir: f64,
}

pub fn accuracy(outputs: &[ProberOutput], dp: &HitMissDataset) -> f64 {
    let correct = outputs
        .iter()
        .zip(&dp.records)
        .filter(|(o, r)| o.verdict.is_hit() == r.hit)
        .count();
    correct as f64 / dp.len().max(1) as f64
}

pub fn report_from_outputs(outputs: &[ProberOutput], dp: &HitMissDataset) -> Result<DetectionReport> {
    if dp.is_empty() {
        return Err(Error::DegenerateDataset("empty hit-miss dataset".into()));
    }
    let s = ScoredLabels::from_outputs(outputs, dp)?;
    let pct = |r: Result<f64>| r.ok().map(|v| 100.0 * v);
    Ok(DetectionReport {
        aupr: pct(aupr(&s)),
        auroc: pct(auroc(&s)),
        fpr95: pct(fpr_at_95_tpr(&s)),
        acc: 100.0 * accuracy(outputs, dp),
        hits: dp.hit_count(),
        misses: dp.miss_count(),
        ir: dp.imbalance_ratio(),
    })
}

pub fn detection_report(prober: &Prober, dp: &HitMissDataset) -> Result<DetectionReport> {
    report_from_outputs(&prober.predict_dataset(dp)?, dp)
}

/// One row of the detection table.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionRow {
    pub dataset: String,
    pub ir_train: f64,
    pub ir_test: f64,
    pub report: DetectionReport,
}

pub(crate) fn fmt2(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.2}")
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt2).unwrap_or_else(|| "NA".to_string())
}

/// Columns: dataset, ir_train, ir_test, aupr, auroc, fpr95, acc (percent, two decimals).
pub fn write_detection_csv(path: impl AsRef<Path>, rows: &[DetectionRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::InvalidConfig(format!("csv: {e}"));
    w.write_record(["dataset", "ir_train", "ir_test", "aupr", "auroc", "fpr95", "acc"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.dataset.clone(),
            fmt2(r.ir_train),
            fmt2(r.ir_test),
            fmt_opt(r.report.aupr),
            fmt_opt(r.report.auroc),
            fmt_opt(r.report.fpr95),
            fmt2(r.report.acc),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidConfig(format!("csv: {e}")))?;
    crate::data::write_file(path.as_ref(), &bytes)
}

/// Per-sample scores for re-checking a report with the standalone metrics.
pub fn write_scores_csv(path: impl AsRef<Path>, s: &ScoredLabels) -> Result<()> {
    let mut out = String::from("p_miss,is_miss\n");
    for (p, m) in s.score.iter().zip(&s.is_miss) {
        out.push_str(&format!("{p:e},{}\n", *m as u8));
    }
    crate::data::write_file(path.as_ref(), out.as_bytes())
}

pub fn read_scores_csv(path: impl AsRef<Path>) -> Result<ScoredLabels> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |reason: String| Error::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    let mut score = Vec::new();
    let mut is_miss = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let (p, m) = line
            .split_once(',')
            .ok_or_else(|| corrupt(format!("line {}: expected two fields", n + 1)))?;
        score.push(p.parse().map_err(|e| corrupt(format!("line {}: {e}", n + 1)))?);
        is_miss.push(m == "1");
    }
    ScoredLabels::new(score, is_miss)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sl(score: &[f64], miss: &[bool]) -> ScoredLabels {
        ScoredLabels::new(score.to_vec(), miss.to_vec()).unwrap()
    }

    #[test]
    fn separated_scores() {
        let s = sl(&[0.9, 0.8, 0.2, 0.1, 0.05], &[true, true, false, false, false]);
        assert_eq!(auroc(&s).unwrap(), 1.0);
        assert_eq!(aupr(&s).unwrap(), 1.0);
        assert_eq!(fpr_at_95_tpr(&s).unwrap(), 0.0);
    }

    #[test]
    fn full_tie() {
        let s = sl(&[0.5, 0.5], &[true, false]);
        assert_eq!(auroc(&s).unwrap(), 0.5);
        let s = sl(&[0.3; 7], &[true, false, true, false, false, false, false]);
        assert!((aupr(&s).unwrap() - 2.0 / 7.0).abs() < 1e-15);
        assert_eq!(fpr_at_95_tpr(&s).unwrap(), 1.0);
    }

    #[test]
    fn one_class_is_an_error() {
        let s = sl(&[0.1, 0.2], &[false, false]);
        assert!(matches!(auroc(&s), Err(Error::OneClassOnly { .. })));
        assert!(matches!(aupr(&s), Err(Error::OneClassOnly { .. })));
        assert!(matches!(fpr_at_95_tpr(&s), Err(Error::OneClassOnly { .. })));
    }

    #[test]
    fn single_top_miss_has_unit_aupr() {
        let s = sl(&[0.99, 0.4, 0.3], &[true, false, false]);
        assert_eq!(aupr(&s).unwrap(), 1.0);
    }
}
