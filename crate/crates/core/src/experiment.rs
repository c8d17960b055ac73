//! Two-phase pipeline (baseline CE -> static lattice -> main objective) and the
//! multi-seed benchmark built on it.

use serde::{Deserialize, Serialize};

use crate::data::{generate, Dataset, SyntheticSpec};
use crate::error::Result;
use crate::lattice::{build_lattice, Accumulation, Lattice};
use crate::losses::{LossConfig, LossMode};
use crate::metrics::{EvalReport, ReportConfig};
use crate::model::{evaluate, train, Classifier, TrainConfig, TrainOutcome};

/// Held-out share used by the benchmark and the CLI default.
pub const DEFAULT_HOLDOUT: f64 = 0.3;

/// Baseline model plus the static lattice derived from its training-set predictions.
#[derive(Debug, Clone)]
pub struct Baseline {
    pub outcome: TrainOutcome,
    pub lattice: Lattice,
}

/// Trains `cfg` with the loss switched to plain cross-entropy and builds the
/// lattice from its predictions over `data`.
pub fn train_baseline(data: &Dataset, cfg: &TrainConfig, accumulation: Accumulation) -> Result<Baseline> {
    let ce = TrainConfig {
        loss: LossConfig {
            mode: LossMode::Ce,
            ..cfg.loss.clone()
        },
        ..cfg.clone()
    };
    let clf = Classifier::new(data.feature_dim(), data.num_classes(), cfg.hidden_units, cfg.seed);
    let outcome = train(clf, data, &ce, None, None)?;
    let lattice = build_lattice(&outcome.classifier.predict(data)?, accumulation)?;
    Ok(Baseline { outcome, lattice })
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub outcome: TrainOutcome,
    /// Lattice the run started from, if its mode uses one.
    pub initial_lattice: Option<Lattice>,
    pub report: EvalReport,
}

impl RunResult {
    /// The lattice to persist: the refined state when present, else the initial one.
    pub fn final_lattice(&self) -> Option<&Lattice> {
        self.outcome
            .lattice
            .as_ref()
            .map(|s| s.current())
            .or(self.initial_lattice.as_ref())
    }
}

/// Trains one configuration from a fresh seeded initialization and reports on `heldout`.
///
/// Lattice modes use `lattice` when given, otherwise run the CE baseline first.
pub fn run(
    train_data: &Dataset,
    heldout: &Dataset,
    cfg: &TrainConfig,
    lattice: Option<&Lattice>,
    report_cfg: &ReportConfig,
) -> Result<RunResult> {
    let built;
    let lattice = match (cfg.mode().needs_lattice(), lattice) {
        (true, None) => {
            built = train_baseline(train_data, cfg, Accumulation::Soft)?.lattice;
            Some(&built)
        }
        (true, Some(l)) => Some(l),
        (false, _) => None,
    };
    let clf = Classifier::new(
        train_data.feature_dim(),
        train_data.num_classes(),
        cfg.hidden_units,
        cfg.seed,
    );
    let outcome = train(clf, train_data, cfg, lattice, Some(heldout))?;
    let dist = train_data.distribution()?;
    let mut report = evaluate(&outcome.classifier, heldout, &dist, report_cfg)?;
    report.mode = Some(cfg.mode().to_string());
    Ok(RunResult {
        outcome,
        initial_lattice: lattice.cloned(),
        report,
    })
}

/// A named loss configuration compared in the benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub loss: LossConfig,
}

impl Variant {
    pub fn new(name: impl Into<String>, loss: LossConfig) -> Self {
        Self {
            name: name.into(),
            loss,
        }
    }

    pub fn mode(mode: LossMode) -> Self {
        Self::new(mode.as_str(), LossConfig::with_mode(mode))
    }
}

/// The comparison set: every mode plus the correlation and balancing ablations of FGPL.
pub fn standard_variants() -> Vec<Variant> {
    let mut v: Vec<Variant> = LossMode::ALL.into_iter().map(Variant::mode).collect();
    v.push(Variant::new(
        "fgpl-no-pc",
        LossConfig {
            use_predicate_correlation: false,
            ..LossConfig::with_mode(LossMode::Fgpl)
        },
    ));
    v.push(Variant::new(
        "fgpl-no-bf",
        LossConfig {
            use_balancing_factor: false,
            ..LossConfig::with_mode(LossMode::Fgpl)
        },
    ));
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub reports: Vec<(String, EvalReport)>,
}

impl SeedResult {
    pub fn report(&self, name: &str) -> Option<&EvalReport> {
        self.reports.iter().find(|(n, _)| n == name).map(|(_, r)| r)
    }
}

/// Generates the data for `seed`, splits off a held-out share, trains one CE
/// baseline (whose lattice every lattice mode shares) and then every variant.
pub fn benchmark_seed(
    spec: &SyntheticSpec,
    train_cfg: &TrainConfig,
    variants: &[Variant],
    seed: u64,
) -> Result<SeedResult> {
    let spec = SyntheticSpec {
        seed,
        ..spec.clone()
    };
    let data = generate(&spec)?;
    let (train_data, heldout) = data.stratified_split(DEFAULT_HOLDOUT, seed)?;
    let cfg = TrainConfig {
        seed,
        ..train_cfg.clone()
    };
    let lattice = train_baseline(&train_data, &cfg, Accumulation::Soft)?.lattice;
    let report_cfg = ReportConfig::default();
    let reports = variants
        .iter()
        .map(|v| {
            let cfg = TrainConfig {
                loss: v.loss.clone(),
                ..cfg.clone()
            };
            let mut r = run(&train_data, &heldout, &cfg, Some(&lattice), &report_cfg)?.report;
            r.mode = Some(v.name.clone());
            Ok((v.name.clone(), r))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SeedResult { seed, reports })
}
