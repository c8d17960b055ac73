//! Synthetic long-tailed data with context-dependent class confusability, plus
//! CSV ingest.
//!
//! Each class has a Gaussian center and each context adds a shared offset. A
//! confusable pair `(a, b, ctx, overlap)` pulls the two class means toward their
//! midpoint inside `ctx` only, so the pair is hard to tell apart there and
//! separable elsewhere.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{build_context_table, ClassDistribution, ContextTable};

const STANDARD_SPEC: &str = include_str!("../configs/standard_benchmark.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfusablePair {
    pub a: usize,
    pub b: usize,
    pub context: u32,
    /// 0 leaves the means untouched, 1 makes them identical within `context`.
    pub overlap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub feature_dim: usize,
    pub contexts: u32,
    /// Head count over tail count; counts fall off geometrically between them.
    pub imbalance_ratio: f64,
    /// Sample count of class 0.
    pub head_count: usize,
    #[serde(default)]
    pub confusable_pairs: Vec<ConfusablePair>,
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    /// Scale of the class centers.
    #[serde(default = "default_separation")]
    pub class_separation: f64,
    /// Scale of the per-context offsets.
    #[serde(default = "default_context_shift")]
    pub context_shift: f64,
    /// Share of a paired class's samples drawn from the pair's context; the rest
    /// spread uniformly over all contexts.
    #[serde(default)]
    pub pair_context_share: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_noise() -> f64 {
    1.0
}

fn default_separation() -> f64 {
    2.0
}

fn default_context_shift() -> f64 {
    0.5
}

impl SyntheticSpec {
    /// The shipped benchmark: 20 classes, 16 features, 5 contexts, ratio 50,
    /// four planted confusable pairs.
    pub fn standard() -> Self {
        serde_json::from_str(STANDARD_SPEC).expect("shipped benchmark spec parses")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::invalid("synthetic spec", reason));
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.feature_dim == 0 || self.contexts == 0 || self.head_count == 0 {
            return bad("feature_dim, contexts and head_count must be positive".into());
        }
        if !(self.imbalance_ratio.is_finite() && self.imbalance_ratio >= 1.0) {
            return bad(format!("imbalance_ratio must be >= 1, got {}", self.imbalance_ratio));
        }
        if !(self.noise_std > 0.0 && self.class_separation >= 0.0 && self.context_shift >= 0.0) {
            return bad("noise_std must be > 0 and scales must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.pair_context_share) {
            return bad("pair_context_share must lie in [0, 1]".into());
        }
        for p in &self.confusable_pairs {
            if p.a >= self.classes || p.b >= self.classes || p.a == p.b {
                return bad(format!("pair ({}, {}) is not two distinct classes", p.a, p.b));
            }
            if p.context >= self.contexts {
                return bad(format!("pair context {} out of range", p.context));
            }
            if !(0.0..=1.0).contains(&p.overlap) {
                return bad(format!("overlap {} outside [0, 1]", p.overlap));
            }
        }
        Ok(())
    }

    /// `round(head_count * r^(-c / (C - 1)))`, at least 1.
    pub fn class_counts(&self) -> Vec<usize> {
        let last = (self.classes - 1) as f64;
        (0..self.classes)
            .map(|c| {
                let n = self.head_count as f64 * self.imbalance_ratio.powf(-(c as f64) / last);
                (n.round() as usize).max(1)
            })
            .collect()
    }

    /// Class means under each context, `[context][class][feature]`.
    pub fn means(&self) -> Vec<Vec<Vec<f64>>> {
        self.geometry(&mut ChaCha8Rng::seed_from_u64(self.seed))
    }

    fn geometry(&self, rng: &mut ChaCha8Rng) -> Vec<Vec<Vec<f64>>> {
        let d = self.feature_dim;
        let mut gauss = |scale: f64| -> Vec<f64> {
            (0..d)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect()
        };
        let centers: Vec<Vec<f64>> = (0..self.classes).map(|_| gauss(self.class_separation)).collect();
        let shifts: Vec<Vec<f64>> = (0..self.contexts).map(|_| gauss(self.context_shift)).collect();
        let mut means: Vec<Vec<Vec<f64>>> = shifts
            .iter()
            .map(|s| {
                centers
                    .iter()
                    .map(|c| c.iter().zip(s).map(|(a, b)| a + b).collect())
                    .collect()
            })
            .collect();
        for p in &self.confusable_pairs {
            let ctx = &mut means[p.context as usize];
            for k in 0..d {
                let mid = 0.5 * (ctx[p.a][k] + ctx[p.b][k]);
                ctx[p.a][k] += p.overlap * (mid - ctx[p.a][k]);
                ctx[p.b][k] += p.overlap * (mid - ctx[p.b][k]);
            }
        }
        means
    }

    fn pair_context(&self, class: usize) -> Option<u32> {
        self.confusable_pairs
            .iter()
            .find(|p| p.a == class || p.b == class)
            .map(|p| p.context)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub context: u32,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    classes: usize,
    feature_dim: usize,
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, classes: usize) -> Result<Self> {
        let feature_dim = samples
            .first()
            .map(|s| s.features.len())
            .ok_or(Error::EmptyDataset("dataset has no samples"))?;
        for s in &samples {
            if s.features.len() != feature_dim {
                return Err(Error::DimensionMismatch {
                    expected: feature_dim,
                    got: s.features.len(),
                });
            }
            if s.label >= classes {
                return Err(Error::ClassOutOfRange {
                    index: s.label,
                    classes,
                });
            }
        }
        Ok(Self {
            classes,
            feature_dim,
            samples,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn class_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.classes];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// Fails with `class-unobserved` when some class has no samples.
    pub fn distribution(&self) -> Result<ClassDistribution> {
        ClassDistribution::new(self.class_counts())
    }

    pub fn context_table(&self) -> Result<ContextTable> {
        build_context_table(self.samples.iter().map(|s| (s.context, s.label)), self.classes)
    }

    /// Per-class split keeping `round(n * fraction)` samples of each class for the
    /// held-out side, but never all of them.
    pub fn stratified_split(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&fraction) || fraction == 0.0 {
            return Err(Error::invalid("holdout fraction", format!("{fraction} outside (0, 1)")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); self.classes];
        for (idx, s) in self.samples.iter().enumerate() {
            by_class[s.label].push(idx);
        }
        let mut train = Vec::new();
        let mut held = Vec::new();
        for mut idx in by_class {
            idx.shuffle(&mut rng);
            let n = idx.len();
            let k = ((n as f64 * fraction).round() as usize).min(n.saturating_sub(1));
            held.extend(idx[..k].iter().map(|&i| self.samples[i].clone()));
            train.extend(idx[k..].iter().map(|&i| self.samples[i].clone()));
        }
        Ok((Dataset::new(train, self.classes)?, Dataset::new(held, self.classes)?))
    }

    /// Writes `label,context,f0,...,f{D-1}` with round-trip float formatting.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["label".to_string(), "context".to_string()];
        header.extend((0..self.feature_dim).map(|k| format!("f{k}")));
        w.write_record(&header)?;
        for s in &self.samples {
            let mut rec = vec![s.label.to_string(), s.context.to_string()];
            rec.extend(s.features.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a dataset CSV. When `classes` is `None` the class count is one more
    /// than the largest label seen.
    pub fn read_csv<R: Read>(reader: R, classes: Option<usize>) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.get(0) != Some("label") || headers.get(1) != Some("context") {
            return Err(Error::Parse {
                line: 1,
                reason: "expected header `label,context,f0,...`".into(),
            });
        }
        let dim = headers.len() - 2;
        if dim == 0 {
            return Err(Error::Parse {
                line: 1,
                reason: "no feature columns".into(),
            });
        }
        for (k, h) in headers.iter().skip(2).enumerate() {
            if h != format!("f{k}") {
                return Err(Error::Parse {
                    line: 1,
                    reason: format!("expected column `f{k}`, found `{h}`"),
                });
            }
        }
        let mut samples = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            let bad = |reason: String| Error::Parse { line, reason };
            if rec.len() != dim + 2 {
                return Err(bad(format!("expected {} fields, found {}", dim + 2, rec.len())));
            }
            let label: usize = rec[0]
                .trim()
                .parse()
                .map_err(|_| bad(format!("label `{}` is not a class index", &rec[0])))?;
            if let Some(c) = classes {
                if label >= c {
                    return Err(bad(format!("label {label} out of range for {c} classes")));
                }
            }
            let context: u32 = rec[1]
                .trim()
                .parse()
                .map_err(|_| bad(format!("context `{}` is not a context id", &rec[1])))?;
            let features = rec
                .iter()
                .skip(2)
                .map(|f| {
                    let v: f64 = f
                        .trim()
                        .parse()
                        .map_err(|_| bad(format!("feature `{f}` is not a number")))?;
                    if v.is_finite() {
                        Ok(v)
                    } else {
                        Err(bad(format!("feature `{f}` is not finite")))
                    }
                })
                .collect::<Result<Vec<f64>>>()?;
            samples.push(Sample {
                features,
                context,
                label,
            });
        }
        let classes = match classes {
            Some(c) => c,
            None => samples.iter().map(|s| s.label + 1).max().unwrap_or(0),
        };
        Dataset::new(samples, classes)
    }
}

/// Draws a dataset from `spec`; deterministic given `spec.seed`.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let means = spec.geometry(&mut rng);
    let mut samples = Vec::new();
    for (class, &count) in spec.class_counts().iter().enumerate() {
        let home = spec.pair_context(class);
        for _ in 0..count {
            let context = match home {
                Some(ctx) if rng.random::<f64>() < spec.pair_context_share => ctx,
                _ => rng.random_range(0..spec.contexts),
            };
            let mean = &means[context as usize][class];
            let features = mean
                .iter()
                .map(|m| m + spec.noise_std * rng.sample::<f64, _>(StandardNormal))
                .collect();
            samples.push(Sample {
                features,
                context,
                label: class,
            });
        }
    }
    Dataset::new(samples, spec.classes)
}

/// Writes a dataset to `path`.
pub fn save_csv(dataset: &Dataset, path: impl AsRef<std::path::Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    dataset.write_csv(std::io::BufWriter::new(file))
}

/// Reads a dataset from `path`, inferring the class count from the labels.
pub fn load_csv(path: impl AsRef<std::path::Path>) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    Dataset::read_csv(std::io::BufReader::new(file), None)
}
