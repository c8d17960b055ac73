//! Confusion statistics, recall families and discriminatory power.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{top_k_off_diagonal, BatchPredictions, ClassDistribution};

/// Discriminatory-power cutoffs reported by default.
pub const DEFAULT_DP_KS: [usize; 3] = [5, 10, 20];

/// Raw and row-normalized confusion counts. `raw[i][j]` counts samples labeled
/// `i` predicted as `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    classes: usize,
    raw: Vec<u64>,
    normalized: Vec<f64>,
    support: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn from_labels(truth: &[usize], predicted: &[usize], classes: usize) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::DimensionMismatch {
                expected: truth.len(),
                got: predicted.len(),
            });
        }
        let mut raw = vec![0u64; classes * classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            for c in [t, p] {
                if c >= classes {
                    return Err(Error::ClassOutOfRange { index: c, classes });
                }
            }
            raw[t * classes + p] += 1;
        }
        Ok(Self::from_raw_counts(classes, raw))
    }

    /// Builds from a row-major count matrix.
    pub fn from_counts(rows: &[Vec<u64>]) -> Result<Self> {
        let c = rows.len();
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::invalid("confusion matrix", "counts must be square"));
        }
        Ok(Self::from_raw_counts(c, rows.concat()))
    }

    /// Builds directly from a row-stochastic matrix; every row counts as supported.
    pub fn from_normalized(rows: &[Vec<f64>]) -> Result<Self> {
        let c = rows.len();
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::invalid("confusion matrix", "rows must be square"));
        }
        for (i, r) in rows.iter().enumerate() {
            let s: f64 = r.iter().sum();
            if r.iter().any(|v| !(0.0..=1.0).contains(v)) || (s - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(
                    "confusion matrix",
                    format!("row {i} is not a distribution"),
                ));
            }
        }
        Ok(Self {
            classes: c,
            raw: vec![0; c * c],
            normalized: rows.concat(),
            support: vec![1; c],
        })
    }

    fn from_raw_counts(classes: usize, raw: Vec<u64>) -> Self {
        let c = classes;
        let mut normalized = vec![0.0; c * c];
        let mut support = vec![0u64; c];
        for i in 0..c {
            let n: u64 = raw[i * c..(i + 1) * c].iter().sum();
            support[i] = n;
            if n > 0 {
                for j in 0..c {
                    normalized[i * c + j] = raw[i * c + j] as f64 / n as f64;
                }
            }
        }
        Self {
            classes,
            raw,
            normalized,
            support,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn raw(&self, i: usize, j: usize) -> u64 {
        self.raw[i * self.classes + j]
    }

    pub fn normalized(&self, i: usize, j: usize) -> f64 {
        self.normalized[i * self.classes + j]
    }

    pub fn normalized_row(&self, i: usize) -> &[f64] {
        &self.normalized[i * self.classes..(i + 1) * self.classes]
    }

    pub fn has_support(&self, i: usize) -> bool {
        self.support[i] > 0
    }

    /// Diagonal of the normalized matrix; `None` for classes with no samples.
    pub fn per_class_recall(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|i| self.has_support(i).then(|| self.normalized(i, i)))
            .collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["label".to_string()];
        header.extend((0..self.classes).map(|j| format!("pred{j}")));
        w.write_record(&header)?;
        for i in 0..self.classes {
            let mut rec = vec![i.to_string()];
            rec.extend(self.raw[i * self.classes..(i + 1) * self.classes].iter().map(u64::to_string));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Argmax confusion of `predictions` against their labels.
pub fn confusion(predictions: &BatchPredictions) -> Result<ConfusionMatrix> {
    if predictions.is_empty() {
        return Err(Error::EmptyDataset("no predictions to tally"));
    }
    ConfusionMatrix::from_labels(
        predictions.labels(),
        &predictions.argmax(),
        predictions.num_classes(),
    )
}

/// Mean gap between each class's diagonal mass and its `k` strongest confusions.
///
/// Rows without support are skipped and the average runs over supported rows.
pub fn dp_at_k(cm: &ConfusionMatrix, k: usize) -> Result<f64> {
    let c = cm.num_classes();
    if k == 0 || k + 1 > c {
        return Err(Error::KOutOfRange { k, max: c.saturating_sub(1) });
    }
    let mut total = 0.0;
    let mut rows = 0usize;
    for i in 0..c {
        if !cm.has_support(i) {
            continue;
        }
        let row = cm.normalized_row(i);
        let mut acc = 0.0;
        for j in top_k_off_diagonal(row, i, k)? {
            acc += (row[i] - row[j]) / k as f64;
        }
        total += acc;
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::EmptyDataset("confusion matrix has no supported rows"));
    }
    Ok(total / rows as f64)
}

/// Mean recall per frequency group. A group is `None` when it has no member
/// with support (or no members at all, as for the tail of a 2-class problem).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRecall {
    pub head: Option<f64>,
    pub body: Option<f64>,
    pub tail: Option<f64>,
    /// Mean of the defined group values.
    pub mean: f64,
    pub sizes: [usize; 3],
}

impl GroupRecall {
    fn defined(&self) -> impl Iterator<Item = f64> {
        [self.head, self.body, self.tail].into_iter().flatten()
    }

    /// `max - min` over the defined groups.
    pub fn spread(&self) -> f64 {
        let max = self.defined().fold(f64::MIN, f64::max);
        let min = self.defined().fold(f64::MAX, f64::min);
        max - min
    }
}

/// Near-equal thirds with the remainder assigned head-first; `(17,17,16)` for 50 classes.
pub fn default_group_sizes(classes: usize) -> [usize; 3] {
    let base = classes / 3;
    let rem = classes % 3;
    [base + usize::from(rem > 0), base + usize::from(rem > 1), base]
}

/// Partitions classes by descending training frequency into consecutive groups
/// and averages member recall within each.
pub fn group_recall(
    per_class_recall: &[Option<f64>],
    dist: &ClassDistribution,
    sizes: [usize; 3],
) -> Result<GroupRecall> {
    let c = dist.num_classes();
    if per_class_recall.len() != c {
        return Err(Error::DimensionMismatch {
            expected: c,
            got: per_class_recall.len(),
        });
    }
    if sizes.iter().sum::<usize>() != c {
        return Err(Error::invalid(
            "group sizes",
            format!("{sizes:?} must sum to {c}"),
        ));
    }
    let order = dist.by_descending_frequency();
    let mut means = [None; 3];
    let mut start = 0;
    for (g, &size) in sizes.iter().enumerate() {
        let vals: Vec<f64> = order[start..start + size]
            .iter()
            .filter_map(|&cls| per_class_recall[cls])
            .collect();
        if !vals.is_empty() {
            means[g] = Some(vals.iter().sum::<f64>() / vals.len() as f64);
        }
        start += size;
    }
    let defined: Vec<f64> = means.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::EmptyDataset("no class with support in any group"));
    }
    Ok(GroupRecall {
        head: means[0],
        body: means[1],
        tail: means[2],
        mean: defined.iter().sum::<f64>() / defined.len() as f64,
        sizes,
    })
}

/// Which metrics [`recall_report`] computes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReportConfig {
    /// Cutoffs for discriminatory power. `None` uses [`DEFAULT_DP_KS`], dropping
    /// any cutoff that does not fit the class count.
    pub dp_ks: Option<Vec<usize>>,
    /// Head/body/tail sizes. `None` uses [`default_group_sizes`].
    pub group_sizes: Option<[usize; 3]>,
}

/// Held-out evaluation summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    pub samples: usize,
    pub accuracy: f64,
    pub per_class_recall: Vec<Option<f64>>,
    pub mean_recall: f64,
    pub group_recall: GroupRecall,
    /// Discriminatory power keyed by cutoff, as a fraction in `[-1, 1]`.
    pub dp: BTreeMap<usize, f64>,
}

impl EvalReport {
    pub fn dp(&self, k: usize) -> Option<f64> {
        self.dp.get(&k).copied()
    }
}

/// Assembles recall, group recall and discriminatory power for `predictions`.
/// `dist` is the training distribution that defines the frequency groups.
pub fn recall_report(
    predictions: &BatchPredictions,
    dist: &ClassDistribution,
    cfg: &ReportConfig,
) -> Result<EvalReport> {
    let cm = confusion(predictions)?;
    report_from_confusion(&cm, dist, cfg)
}

pub fn report_from_confusion(
    cm: &ConfusionMatrix,
    dist: &ClassDistribution,
    cfg: &ReportConfig,
) -> Result<EvalReport> {
    let c = cm.num_classes();
    if dist.num_classes() != c {
        return Err(Error::DimensionMismatch {
            expected: c,
            got: dist.num_classes(),
        });
    }
    let per_class_recall = cm.per_class_recall();
    let supported: Vec<f64> = per_class_recall.iter().flatten().copied().collect();
    if supported.is_empty() {
        return Err(Error::EmptyDataset("no supported classes"));
    }
    let mean_recall = supported.iter().sum::<f64>() / supported.len() as f64;
    let samples: u64 = cm.support.iter().sum();
    let correct: u64 = (0..c).map(|i| cm.raw(i, i)).sum();
    let group_recall = group_recall(
        &per_class_recall,
        dist,
        cfg.group_sizes.unwrap_or_else(|| default_group_sizes(c)),
    )?;
    let ks: Vec<usize> = match &cfg.dp_ks {
        Some(ks) => ks.clone(),
        None => DEFAULT_DP_KS.into_iter().filter(|&k| k < c).collect(),
    };
    let dp = ks
        .into_iter()
        .map(|k| dp_at_k(cm, k).map(|v| (k, v)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(EvalReport {
        mode: None,
        samples: samples as usize,
        accuracy: correct as f64 / samples as f64,
        per_class_recall,
        mean_recall,
        group_recall,
        dp,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_hot_preds(labels: &[usize], predicted: &[usize], c: usize) -> BatchPredictions {
        let probs = predicted
            .iter()
            .map(|&p| {
                let mut r = vec![0.0; c];
                r[p] = 1.0;
                r
            })
            .collect();
        BatchPredictions::new(probs, labels.to_vec(), c).unwrap()
    }

    #[test]
    fn confusion_counts() {
        let cm = confusion(&one_hot_preds(&[0, 0, 1], &[0, 1, 1], 2)).unwrap();
        assert_eq!(
            [cm.raw(0, 0), cm.raw(0, 1), cm.raw(1, 0), cm.raw(1, 1)],
            [1, 1, 0, 1]
        );
        assert_eq!(cm.normalized_row(0), &[0.5, 0.5]);
        let mut out = Vec::new();
        cm.write_csv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "label,pred0,pred1\n0,1,1\n1,0,1\n");
    }

    #[test]
    fn perfect_predictor_is_identity() {
        let labels = [0, 1, 2, 2, 1];
        let cm = confusion(&one_hot_preds(&labels, &labels, 3)).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(cm.normalized(i, j), if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn dp_examples() {
        let id = ConfusionMatrix::from_normalized(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        assert_eq!(dp_at_k(&id, 1).unwrap(), 1.0);
        assert_eq!(dp_at_k(&id, 2).unwrap(), 1.0);

        let cm = ConfusionMatrix::from_normalized(&[vec![0.8, 0.2], vec![0.1, 0.9]]).unwrap();
        assert!((dp_at_k(&cm, 1).unwrap() - 0.7).abs() < 1e-9);

        let third = 1.0 / 3.0;
        let uni = ConfusionMatrix::from_normalized(&vec![vec![third; 3]; 3]).unwrap();
        assert_eq!(dp_at_k(&uni, 2).unwrap(), 0.0);

        assert!(matches!(dp_at_k(&cm, 2), Err(Error::KOutOfRange { k: 2, max: 1 })));
        assert!(dp_at_k(&cm, 0).is_err());
    }

    #[test]
    fn dp_skips_unsupported_rows() {
        let cm = ConfusionMatrix::from_counts(&[vec![3, 1, 0], vec![0, 0, 0], vec![0, 1, 3]]).unwrap();
        // rows 0 and 2: (0.75 - 0.25) and (0.75 - 0.25)
        assert!((dp_at_k(&cm, 1).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(cm.per_class_recall()[1], None);
    }

    #[test]
    fn group_sizes() {
        assert_eq!(default_group_sizes(50), [17, 17, 16]);
        assert_eq!(default_group_sizes(20), [7, 7, 6]);
        assert_eq!(default_group_sizes(6), [2, 2, 2]);
        assert_eq!(default_group_sizes(4), [2, 1, 1]);
    }

    #[test]
    fn group_recall_partition() {
        let dist = ClassDistribution::new(vec![60, 50, 40, 30, 20, 10]).unwrap();
        let r = [1.0, 1.0, 0.0, 0.0, 1.0, 1.0].map(Some);
        let g = group_recall(&r, &dist, [2, 2, 2]).unwrap();
        assert_eq!((g.head, g.body, g.tail), (Some(1.0), Some(0.0), Some(1.0)));
        assert_eq!(g.spread(), 1.0);

        // frequency order, not index order, defines the groups
        let dist = ClassDistribution::new(vec![10, 20, 30, 40, 50, 60]).unwrap();
        let g = group_recall(&r, &dist, [2, 2, 2]).unwrap();
        assert_eq!((g.head, g.body, g.tail), (Some(1.0), Some(0.0), Some(1.0)));
        let r = [0.0, 0.5, 0.5, 1.0, 1.0, 1.0].map(Some);
        let g = group_recall(&r, &dist, [2, 2, 2]).unwrap();
        assert_eq!((g.head, g.body, g.tail), (Some(1.0), Some(0.75), Some(0.25)));

        let flat = [Some(0.4); 6];
        let g = group_recall(&flat, &dist, [3, 2, 1]).unwrap();
        assert!([g.head, g.body, g.tail]
            .iter()
            .flatten()
            .chain([g.mean].iter())
            .all(|v| (v - 0.4).abs() < 1e-15));

        assert!(group_recall(&flat, &dist, [3, 3, 3]).is_err());
    }

    #[test]
    fn majority_predictor() {
        let labels = [0, 0, 0, 1];
        let preds = one_hot_preds(&labels, &[0, 0, 0, 0], 2);
        let dist = ClassDistribution::new(vec![3, 1]).unwrap();
        let rep = recall_report(&preds, &dist, &ReportConfig::default()).unwrap();
        assert_eq!(rep.per_class_recall, vec![Some(1.0), Some(0.0)]);
        assert_eq!(rep.mean_recall, 0.5);
        assert_eq!(rep.group_recall.sizes, [1, 1, 0]);
        assert_eq!(rep.group_recall.tail, None);
        assert!(rep.dp.is_empty());
        assert_eq!(rep.accuracy, 0.75);
    }

    #[test]
    fn report_perfect() {
        let labels: Vec<usize> = (0..30).map(|i| i % 6).collect();
        let preds = one_hot_preds(&labels, &labels, 6);
        let dist = ClassDistribution::new(vec![5; 6]).unwrap();
        let rep = recall_report(&preds, &dist, &ReportConfig::default()).unwrap();
        assert_eq!(rep.mean_recall, 1.0);
        assert_eq!(rep.accuracy, 1.0);
        // only k=5 fits six classes
        assert_eq!(rep.dp.keys().copied().collect::<Vec<_>>(), vec![5]);
        assert_eq!(rep.dp(5), Some(1.0));
        let back: EvalReport = serde_json::from_str(&serde_json::to_string(&rep).unwrap()).unwrap();
        assert_eq!(back, rep);

        let err = recall_report(
            &preds,
            &dist,
            &ReportConfig {
                dp_ks: Some(vec![6]),
                group_sizes: None,
            },
        );
        assert!(err.is_err());
    }
}
