//! Class-correlation lattice.
//!
//! A [`Lattice`] is a row-stochastic `C x C` matrix where `s[i][j]` is the share
//! of samples labeled `i` that a model assigns to class `j`. The static lattice
//! is built once from a baseline model's predictions over the training set; an
//! [`AdaptiveLattice`] then tracks the model being trained by blending in
//! per-batch refining momentum.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower bound applied to every probability before ratios are taken.
pub const PROB_FLOOR: f64 = 1e-8;
/// Lower bound applied to the lattice diagonal so correlation ratios stay defined.
pub const DIAGONAL_FLOOR: f64 = 1e-6;
/// Row-sum tolerance for anything claiming to be a distribution.
pub const ROW_TOLERANCE: f64 = 1e-9;
/// Looser tolerance accepted on probability rows coming from outside (CSV logs).
const INPUT_ROW_TOLERANCE: f64 = 1e-6;

/// Per-class training sample counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u64>", into = "Vec<u64>")]
pub struct ClassDistribution {
    counts: Vec<u64>,
}

impl ClassDistribution {
    pub fn new(counts: Vec<u64>) -> Result<Self> {
        if counts.len() < 2 {
            return Err(Error::invalid(
                "class distribution",
                format!("need at least 2 classes, got {}", counts.len()),
            ));
        }
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::ClassUnobserved(c));
        }
        Ok(Self { counts })
    }

    /// Counts labels in `0..num_classes`.
    pub fn from_labels(labels: &[usize], num_classes: usize) -> Result<Self> {
        let mut counts = vec![0u64; num_classes];
        for &l in labels {
            if l >= num_classes {
                return Err(Error::ClassOutOfRange {
                    index: l,
                    classes: num_classes,
                });
            }
            counts[l] += 1;
        }
        Self::new(counts)
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn count(&self, class: usize) -> u64 {
        self.counts[class]
    }

    /// Frequency ratio `n_j / n_i`.
    pub fn ratio(&self, i: usize, j: usize) -> f64 {
        self.counts[j] as f64 / self.counts[i] as f64
    }

    /// Class indices sorted by descending count, ties by lower index.
    pub fn by_descending_frequency(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.counts.len()).collect();
        order.sort_by(|&a, &b| self.counts[b].cmp(&self.counts[a]).then(a.cmp(&b)));
        order
    }
}

impl TryFrom<Vec<u64>> for ClassDistribution {
    type Error = Error;

    fn try_from(counts: Vec<u64>) -> Result<Self> {
        Self::new(counts)
    }
}

impl From<ClassDistribution> for Vec<u64> {
    fn from(d: ClassDistribution) -> Self {
        d.counts
    }
}

/// Occurrence counts of each class under each context id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextTable {
    num_classes: usize,
    rows: BTreeMap<u32, Vec<u64>>,
}

impl ContextTable {
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn row(&self, context: u32) -> Option<&[u64]> {
        self.rows.get(&context).map(Vec::as_slice)
    }

    pub fn contexts(&self) -> impl Iterator<Item = u32> + '_ {
        self.rows.keys().copied()
    }

    pub fn rows(&self) -> impl Iterator<Item = (u32, &[u64])> {
        self.rows.iter().map(|(&k, v)| (k, v.as_slice()))
    }

    pub fn total(&self) -> u64 {
        self.rows.values().flatten().sum()
    }

    /// Relative frequency of `class` within `context`.
    pub fn frequency(&self, context: u32, class: usize) -> Option<f64> {
        let row = self.rows.get(&context)?;
        let total: u64 = row.iter().sum();
        Some(row[class] as f64 / total as f64)
    }
}

/// Tallies `(context, class)` co-occurrences.
pub fn build_context_table<I>(samples: I, num_classes: usize) -> Result<ContextTable>
where
    I: IntoIterator<Item = (u32, usize)>,
{
    let mut rows: BTreeMap<u32, Vec<u64>> = BTreeMap::new();
    for (ctx, class) in samples {
        if class >= num_classes {
            return Err(Error::ClassOutOfRange {
                index: class,
                classes: num_classes,
            });
        }
        rows.entry(ctx).or_insert_with(|| vec![0; num_classes])[class] += 1;
    }
    if rows.is_empty() {
        return Err(Error::EmptyDataset("no samples to build a context table from"));
    }
    Ok(ContextTable { num_classes, rows })
}

/// Row-stochastic class-correlation matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Lattice {
    classes: usize,
    corr: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct LatticeFile {
    classes: usize,
    corr: Vec<Vec<f64>>,
}

impl Lattice {
    /// Validates shape, non-negativity and row sums.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let classes = rows.len();
        if classes < 2 {
            return Err(Error::invalid(
                "lattice",
                format!("need at least 2 classes, got {classes}"),
            ));
        }
        let mut corr = Vec::with_capacity(classes * classes);
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != classes {
                return Err(Error::invalid(
                    "lattice",
                    format!("row {i} has {} entries, expected {classes}", row.len()),
                ));
            }
            corr.extend(row);
        }
        let lat = Self { classes, corr };
        lat.validate()?;
        Ok(lat)
    }

    pub fn identity(classes: usize) -> Self {
        let mut corr = vec![0.0; classes * classes];
        for i in 0..classes {
            corr[i * classes + i] = 1.0;
        }
        Self { classes, corr }
    }

    fn validate(&self) -> Result<()> {
        for i in 0..self.classes {
            let row = self.row(i);
            if let Some(j) = row.iter().position(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::invalid(
                    "lattice",
                    format!("entry ({i},{j}) = {} is not a nonnegative number", row[j]),
                ));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_TOLERANCE {
                return Err(Error::invalid(
                    "lattice",
                    format!("row {i} sums to {sum}, expected 1"),
                ));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.corr[i * self.classes + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.corr[i * self.classes..(i + 1) * self.classes]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.classes).map(|i| self.row(i).to_vec()).collect()
    }

    /// `phi_{i,j} = s_{i,j} / s_{i,i}`.
    pub fn correlation_ratio(&self, i: usize, j: usize) -> Result<f64> {
        self.check_class(i)?;
        self.check_class(j)?;
        let diag = self.get(i, i);
        if diag == 0.0 {
            return Err(Error::DegenerateDiagonal(i));
        }
        Ok(self.get(i, j) / diag)
    }

    /// The `k` classes `j != i` with the largest `s[i][j]`, strongest first.
    pub fn topk_correlated(&self, i: usize, k: usize) -> Result<Vec<usize>> {
        self.check_class(i)?;
        top_k_off_diagonal(self.row(i), i, k)
    }

    fn check_class(&self, c: usize) -> Result<()> {
        if c >= self.classes {
            return Err(Error::ClassOutOfRange {
                index: c,
                classes: self.classes,
            });
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let file = LatticeFile {
            classes: self.classes,
            corr: self.to_rows(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: LatticeFile = serde_json::from_str(text)?;
        if file.corr.len() != file.classes {
            return Err(Error::invalid(
                "lattice",
                format!(
                    "declared {} classes but found {} rows",
                    file.classes,
                    file.corr.len()
                ),
            ));
        }
        Self::from_rows(file.corr)
    }

    pub fn write_json<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(self.to_json()?.as_bytes())?;
        w.write_all(b"\n")?;
        Ok(())
    }

    pub fn read_json<R: Read>(mut r: R) -> Result<Self> {
        let mut text = String::new();
        r.read_to_string(&mut text)?;
        Self::from_json(&text)
    }

    /// Floors the diagonal then renormalizes affected rows.
    fn floor_diagonal(&mut self) {
        let c = self.classes;
        for i in 0..c {
            if self.corr[i * c + i] < DIAGONAL_FLOOR {
                self.corr[i * c + i] = DIAGONAL_FLOOR;
                normalize_in_place(&mut self.corr[i * c..(i + 1) * c]);
            }
        }
    }
}

/// Indices of the `k` largest entries of `row` excluding `skip`; ties go to the lower index.
pub(crate) fn top_k_off_diagonal(row: &[f64], skip: usize, k: usize) -> Result<Vec<usize>> {
    let max = row.len().saturating_sub(1);
    if k == 0 || k > max {
        return Err(Error::KOutOfRange { k, max });
    }
    let mut idx: Vec<usize> = (0..row.len()).filter(|&j| j != skip).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

fn normalize_in_place(row: &mut [f64]) {
    let sum: f64 = row.iter().sum();
    for v in row {
        *v /= sum;
    }
}

/// Per-sample class probabilities with ground-truth labels.
///
/// Rows are floored at [`PROB_FLOOR`] and renormalized on construction, so every
/// stored probability is strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPredictions {
    classes: usize,
    probs: Vec<f64>,
    labels: Vec<usize>,
}

impl BatchPredictions {
    pub fn new(probs: Vec<Vec<f64>>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if probs.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: labels.len(),
                got: probs.len(),
            });
        }
        let mut flat = Vec::with_capacity(probs.len() * classes);
        for (m, row) in probs.iter().enumerate() {
            if row.len() != classes {
                return Err(Error::DimensionMismatch {
                    expected: classes,
                    got: row.len(),
                });
            }
            if labels[m] >= classes {
                return Err(Error::ClassOutOfRange {
                    index: labels[m],
                    classes,
                });
            }
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::invalid(
                    "predictions",
                    format!("row {m} has a negative or non-finite probability"),
                ));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > INPUT_ROW_TOLERANCE {
                return Err(Error::invalid(
                    "predictions",
                    format!("row {m} sums to {sum}, expected 1"),
                ));
            }
            let start = flat.len();
            flat.extend(row.iter().map(|p| p.max(PROB_FLOOR)));
            normalize_in_place(&mut flat[start..]);
        }
        Ok(Self {
            classes,
            probs: flat,
            labels,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn probs(&self, m: usize) -> &[f64] {
        &self.probs[m * self.classes..(m + 1) * self.classes]
    }

    pub fn rows(&self) -> impl Iterator<Item = (&[f64], usize)> {
        self.probs
            .chunks_exact(self.classes)
            .zip(self.labels.iter().copied())
    }

    /// Predicted class per sample; ties resolve to the lower index.
    pub fn argmax(&self) -> Vec<usize> {
        self.probs.chunks_exact(self.classes).map(argmax).collect()
    }

    /// Reads a prediction log with header `label,p0,...,p{C-1}`.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.get(0) != Some("label") {
            return Err(Error::Parse {
                line: 1,
                reason: "expected header starting with `label`".into(),
            });
        }
        let classes = headers.len() - 1;
        for (j, h) in headers.iter().skip(1).enumerate() {
            if h != format!("p{j}") {
                return Err(Error::Parse {
                    line: 1,
                    reason: format!("expected column `p{j}`, found `{h}`"),
                });
            }
        }
        let mut probs = Vec::new();
        let mut labels = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            let bad = |reason: String| Error::Parse { line, reason };
            if rec.len() != classes + 1 {
                return Err(bad(format!(
                    "expected {} fields, found {}",
                    classes + 1,
                    rec.len()
                )));
            }
            let label: usize = rec[0]
                .trim()
                .parse()
                .map_err(|_| bad(format!("label `{}` is not a class index", &rec[0])))?;
            let row = rec
                .iter()
                .skip(1)
                .map(|f| {
                    f.trim()
                        .parse::<f64>()
                        .map_err(|_| bad(format!("`{f}` is not a number")))
                })
                .collect::<Result<Vec<_>>>()?;
            labels.push(label);
            probs.push(row);
        }
        Self::new(probs, labels, classes)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["label".to_string()];
        header.extend((0..self.classes).map(|j| format!("p{j}")));
        w.write_record(&header)?;
        for (row, label) in self.rows() {
            let mut rec = vec![label.to_string()];
            rec.extend(row.iter().map(|p| p.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = j;
        }
    }
    best
}

/// How predictions are accumulated into the static lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Accumulation {
    /// Sum probability mass per class.
    #[default]
    Soft,
    /// Count argmax predictions.
    Hard,
}

/// Builds the static lattice from predictions over the whole training set.
pub fn build_lattice(predictions: &BatchPredictions, mode: Accumulation) -> Result<Lattice> {
    let c = predictions.num_classes();
    if predictions.is_empty() {
        return Err(Error::EmptyDataset("no predictions to build a lattice from"));
    }
    let mut corr = vec![0.0; c * c];
    let mut support = vec![0usize; c];
    for (row, label) in predictions.rows() {
        support[label] += 1;
        let acc = &mut corr[label * c..(label + 1) * c];
        match mode {
            Accumulation::Soft => acc.iter_mut().zip(row).for_each(|(a, p)| *a += p),
            Accumulation::Hard => acc[argmax(row)] += 1.0,
        }
    }
    if let Some(missing) = support.iter().position(|&n| n == 0) {
        return Err(Error::ClassUnobserved(missing));
    }
    for (i, n) in support.iter().enumerate() {
        corr[i * c..(i + 1) * c]
            .iter_mut()
            .for_each(|v| *v /= *n as f64);
        normalize_in_place(&mut corr[i * c..(i + 1) * c]);
    }
    let mut lat = Lattice { classes: c, corr };
    lat.floor_diagonal();
    Ok(lat)
}

/// Which refining-momentum terms contribute to `S^t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MomentumTerms {
    /// Category refining momentum (batch-pooled ratios).
    pub crm: bool,
    /// Entity refining momentum (mean of per-sample ratios).
    pub erm: bool,
}

impl Default for MomentumTerms {
    fn default() -> Self {
        Self {
            crm: true,
            erm: true,
        }
    }
}

/// Un-normalized refining momentum for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct RefiningMomentum {
    classes: usize,
    crm: Vec<f64>,
    erm: Vec<f64>,
    present: Vec<bool>,
}

impl RefiningMomentum {
    pub fn crm(&self, i: usize) -> Option<&[f64]> {
        self.present[i].then(|| &self.crm[i * self.classes..(i + 1) * self.classes])
    }

    pub fn erm(&self, i: usize) -> Option<&[f64]> {
        self.present[i].then(|| &self.erm[i * self.classes..(i + 1) * self.classes])
    }

    /// `S^t_i` restricted to the selected terms; `None` when class `i` is absent.
    pub fn combined(&self, i: usize, terms: MomentumTerms) -> Option<Vec<f64>> {
        if !self.present[i] || !(terms.crm || terms.erm) {
            return None;
        }
        let c = self.classes;
        Some(
            (0..c)
                .map(|j| {
                    let mut s = 0.0;
                    if terms.crm {
                        s += self.crm[i * c + j];
                    }
                    if terms.erm {
                        s += self.erm[i * c + j];
                    }
                    s
                })
                .collect(),
        )
    }

    pub fn is_present(&self, i: usize) -> bool {
        self.present[i]
    }
}

/// Computes CRM and ERM over a batch.
pub fn refining_momentum(batch: &BatchPredictions) -> Result<RefiningMomentum> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset("refining momentum needs a nonempty batch"));
    }
    let c = batch.num_classes();
    // pooled[i][j] = sum_m p_j over samples labeled i
    let mut pooled = vec![0.0; c * c];
    let mut ratio_sum = vec![0.0; c * c];
    let mut support = vec![0usize; c];
    for (row, i) in batch.rows() {
        let p_i = row[i];
        debug_assert!(p_i >= PROB_FLOOR * 0.5, "probability below floor");
        support[i] += 1;
        for j in 0..c {
            pooled[i * c + j] += row[j];
            ratio_sum[i * c + j] += row[j] / p_i;
        }
    }
    let mut crm = vec![0.0; c * c];
    let mut erm = vec![0.0; c * c];
    for i in 0..c {
        if support[i] == 0 {
            continue;
        }
        let denom = pooled[i * c + i];
        for j in 0..c {
            crm[i * c + j] = pooled[i * c + j] / denom;
            erm[i * c + j] = ratio_sum[i * c + j] / support[i] as f64;
        }
    }
    Ok(RefiningMomentum {
        classes: c,
        crm,
        erm,
        present: support.iter().map(|&n| n > 0).collect(),
    })
}

/// Lattice refined online from mini-batch predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveLattice {
    current: Lattice,
    initial: Lattice,
    tau: f64,
    terms: MomentumTerms,
    step: u64,
}

impl AdaptiveLattice {
    pub fn new(initial: Lattice, tau: f64) -> Result<Self> {
        Self::with_terms(initial, tau, MomentumTerms::default())
    }

    pub fn with_terms(initial: Lattice, tau: f64, terms: MomentumTerms) -> Result<Self> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::invalid("tau", format!("{tau} is outside [0, 1]")));
        }
        Ok(Self {
            current: initial.clone(),
            initial,
            tau,
            terms,
            step: 0,
        })
    }

    pub fn current(&self) -> &Lattice {
        &self.current
    }

    pub fn initial(&self) -> &Lattice {
        &self.initial
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn terms(&self) -> MomentumTerms {
        self.terms
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// One batch-refinement step: `s_i <- tau * s_i + (1 - tau) * normalize(S_i)`
    /// for every class present in the batch. Absent rows carry over.
    pub fn refine_step(&mut self, batch: &BatchPredictions) -> Result<()> {
        let c = self.current.classes;
        if batch.num_classes() != c {
            return Err(Error::DimensionMismatch {
                expected: c,
                got: batch.num_classes(),
            });
        }
        let momentum = refining_momentum(batch)?;
        for i in 0..c {
            let Some(mut target) = momentum.combined(i, self.terms) else {
                continue;
            };
            normalize_in_place(&mut target);
            let row = &mut self.current.corr[i * c..(i + 1) * c];
            for (s, t) in row.iter_mut().zip(&target) {
                *s = self.tau * *s + (1.0 - self.tau) * t;
            }
        }
        self.step += 1;
        Ok(())
    }
}
