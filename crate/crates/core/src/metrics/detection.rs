//! Threshold-free detection metrics over labelled anomaly scores.
//!
//! Higher scores mean "more anomalous". Label `true` marks an anomalous
//! (out-of-distribution) sample.

use std::cmp::Ordering;
use std::io::Write;

use crate::error::{Error, Result};

/// Group label carried by in-distribution rows.
pub const NORMAL_GROUP: &str = "normal";
/// Name of the row pooling every anomalous group.
pub const ALL_GROUP: &str = "All";

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledScore {
    pub score: f64,
    pub anomalous: bool,
    pub group: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledScores {
    pub items: Vec<LabeledScore>,
}

impl LabeledScores {
    pub fn new() -> Self {
        Self::default()
    }

    /// Scores paired with labels; groups are `normal` / `anomalous`.
    pub fn from_pairs(scores: &[f64], labels: &[bool]) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} scores but {} labels",
                scores.len(),
                labels.len()
            )));
        }
        let mut out = Self::new();
        for (&s, &l) in scores.iter().zip(labels) {
            out.push(s, l, if l { "anomalous" } else { NORMAL_GROUP });
        }
        Ok(out)
    }

    pub fn push(&mut self, score: f64, anomalous: bool, group: impl Into<String>) {
        self.items.push(LabeledScore {
            score,
            anomalous,
            group: group.into(),
        });
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.items.iter().filter(|i| i.anomalous).count()
    }

    pub fn negatives(&self) -> usize {
        self.len() - self.positives()
    }

    /// Distinct anomalous group names in sorted order.
    pub fn anomalous_groups(&self) -> Vec<String> {
        let mut groups: Vec<String> = self
            .items
            .iter()
            .filter(|i| i.anomalous)
            .map(|i| i.group.clone())
            .collect();
        groups.sort();
        groups.dedup();
        groups
    }

    /// All normal rows plus the anomalous rows of `group`.
    pub fn restrict_to_group(&self, group: &str) -> Self {
        Self {
            items: self
                .items
                .iter()
                .filter(|i| !i.anomalous || i.group == group)
                .cloned()
                .collect(),
        }
    }

    fn check(&self) -> Result<()> {
        if let Some(i) = self.items.iter().find(|i| !i.score.is_finite()) {
            return Err(Error::invalid(format!("non-finite score {}", i.score)));
        }
        let (p, n) = (self.positives(), self.negatives());
        if p == 0 || n == 0 {
            return Err(Error::SingleClass {
                positives: p,
                negatives: n,
            });
        }
        Ok(())
    }

    /// Indices sorted by descending score; equal scores keep input order.
    fn descending(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| {
            self.items[b]
                .score
                .partial_cmp(&self.items[a].score)
                .unwrap_or(Ordering::Equal)
        });
        idx
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    /// Samples with `score >= threshold` are flagged; the first point uses +inf.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC staircase from (0, 0) to (1, 1) with one point per distinct score.
pub fn roc_curve(scores: &LabeledScores) -> Result<Vec<RocPoint>> {
    scores.check()?;
    let (p, n) = (scores.positives() as f64, scores.negatives() as f64);
    let order = scores.descending();
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores.items[order[i]].score;
        while i < order.len() && scores.items[order[i]].score == threshold {
            if scores.items[order[i]].anomalous {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold,
            fpr: fp as f64 / n,
            tpr: tp as f64 / p,
        });
    }
    Ok(points)
}

/// Mann–Whitney estimate of P(anomalous score > normal score), ties
/// counted as one half. Equals the trapezoidal area under [`roc_curve`].
pub fn auroc(scores: &LabeledScores) -> Result<f64> {
    scores.check()?;
    let mut sorted: Vec<(f64, bool)> = scores.items.iter().map(|i| (i.score, i.anomalous)).collect();
    sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal));
    // Sum of mid-ranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            j += 1;
        }
        let mid_rank = (i + j + 1) as f64 / 2.0;
        rank_sum += mid_rank * sorted[i..j].iter().filter(|s| s.1).count() as f64;
        i = j;
    }
    let (p, n) = (scores.positives() as f64, scores.negatives() as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Average precision as the step-wise area under the precision-recall
/// curve: the sum over distinct thresholds of precision times the recall
/// gained there. Tied scores enter together, so the value does not depend
/// on row order. Without ties this is the mean precision at the ranks of
/// the anomalous samples.
pub fn average_precision(scores: &LabeledScores) -> Result<f64> {
    let (p, n) = (scores.positives() as f64, scores.negatives() as f64);
    let mut ap = 0.0;
    let mut prev_tp = 0.0;
    for pt in roc_curve(scores)?.iter().skip(1) {
        let tp = (pt.tpr * p).round();
        let fp = (pt.fpr * n).round();
        if tp > prev_tp {
            ap += (tp - prev_tp) / p * tp / (tp + fp);
            prev_tp = tp;
        }
    }
    Ok(ap)
}

/// One row of a per-group metric table. `auroc`/`ap` are `None` when the
/// group had no anomalous samples.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupMetrics {
    pub group: String,
    /// Number of anomalous samples in the group.
    pub n: usize,
    pub auroc: Option<f64>,
    pub ap: Option<f64>,
}

/// Metrics for every anomalous group present, followed by the pooled
/// [`ALL_GROUP`] row.
pub fn evaluate_groups(scores: &LabeledScores) -> Result<Vec<GroupMetrics>> {
    let groups = scores.anomalous_groups();
    evaluate_named_groups(scores, &groups)
}

/// Like [`evaluate_groups`] but over the given group names; a name with no
/// anomalous samples yields an empty warning row instead of an error.
pub fn evaluate_named_groups(scores: &LabeledScores, groups: &[String]) -> Result<Vec<GroupMetrics>> {
    scores.check()?;
    let mut rows = Vec::with_capacity(groups.len() + 1);
    for g in groups {
        let subset = scores.restrict_to_group(g);
        let n = subset.positives();
        if n == 0 {
            log::warn!("group {g} has no anomalous samples; skipped");
            rows.push(GroupMetrics {
                group: g.clone(),
                n: 0,
                auroc: None,
                ap: None,
            });
            continue;
        }
        rows.push(GroupMetrics {
            group: g.clone(),
            n,
            auroc: Some(auroc(&subset)?),
            ap: Some(average_precision(&subset)?),
        });
    }
    rows.push(GroupMetrics {
        group: ALL_GROUP.to_string(),
        n: scores.positives(),
        auroc: Some(auroc(scores)?),
        ap: Some(average_precision(scores)?),
    });
    Ok(rows)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

/// CSV with header `group,n,auroc,ap`; missing values are written as `NA`.
pub fn write_group_table(rows: &[GroupMetrics], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "group,n,auroc,ap")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", r.group, r.n, fmt_opt(r.auroc), fmt_opt(r.ap))?;
    }
    Ok(())
}

/// CSV with header `threshold,fpr,tpr`.
pub fn write_roc(points: &[RocPoint], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "threshold,fpr,tpr")?;
    for p in points {
        writeln!(out, "{},{:.6},{:.6}", p.threshold, p.fpr, p.tpr)?;
    }
    Ok(())
}
