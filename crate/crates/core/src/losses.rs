//! Correlation-aware discriminating losses with analytic logit gradients.
//!
//! Every loss here is a function of one sample's logits `eta` and its label.
//! The category-level terms re-weight the softmax denominator per (positive,
//! negative) class pair; the entity-level terms add a frequency-balanced hinge
//! against that class's most correlated negatives.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{AdaptiveLattice, ClassDistribution, Lattice, MomentumTerms};

/// Training objective selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// Plain softmax cross-entropy.
    Ce,
    /// Frequency-ratio re-weighted softmax only.
    Reweight,
    /// Correlation-aware re-weighting against the static lattice.
    Cdl,
    /// `cdl + gamma * edl` on the static lattice.
    Fgpl,
    /// `cdl + theta * als` on the adaptive lattice.
    CdlA,
    /// `cdl_a + gamma * edl_a` on the adaptive lattice.
    FgplA,
}

impl LossMode {
    pub const ALL: [LossMode; 6] = [
        LossMode::Ce,
        LossMode::Reweight,
        LossMode::Cdl,
        LossMode::Fgpl,
        LossMode::CdlA,
        LossMode::FgplA,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::Ce => "ce",
            LossMode::Reweight => "reweight",
            LossMode::Cdl => "cdl",
            LossMode::Fgpl => "fgpl",
            LossMode::CdlA => "cdl-a",
            LossMode::FgplA => "fgpl-a",
        }
    }

    /// Whether the mode reads a lattice at all.
    pub fn needs_lattice(self) -> bool {
        !matches!(self, LossMode::Ce | LossMode::Reweight)
    }

    /// Whether the mode reads the refined (current) lattice rather than the initial one.
    pub fn is_adaptive(self) -> bool {
        matches!(self, LossMode::CdlA | LossMode::FgplA)
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::invalid(
                    "loss mode",
                    format!("`{s}` (expected one of ce, reweight, cdl, fgpl, cdl-a, fgpl-a)"),
                )
            })
    }
}

/// Scalar hyper-parameters and ablation switches for every loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub mode: LossMode,
    /// Exponent for down-weighting rarer negatives of weakly correlated pairs.
    pub alpha: f64,
    /// Exponent for up-weighting more frequent negatives of strongly correlated pairs.
    pub beta: f64,
    /// Correlation-ratio threshold separating hard-to-distinguish pairs.
    pub xi: f64,
    /// Hinge margin.
    pub delta: f64,
    /// Size of the hard-negative set.
    pub k_hard: usize,
    /// Weight of the entity-level hinge term.
    pub gamma: f64,
    /// Weight of the adaptive label-softening term.
    pub theta: f64,
    /// Lattice blend coefficient.
    pub tau: f64,
    /// When off, weights fall back to the frequency-only rule.
    pub use_predicate_correlation: bool,
    /// When off, the hinge's `n_j / n_i` factor becomes 1.
    pub use_balancing_factor: bool,
    /// When off, the hinge runs against every negative class instead of the top-k set.
    pub use_hard_negative_set: bool,
    /// Which refining-momentum terms update the adaptive lattice.
    pub momentum: MomentumTerms,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            mode: LossMode::FgplA,
            alpha: 1.5,
            beta: 2.0,
            xi: 0.9,
            delta: 0.5,
            k_hard: 5,
            gamma: 0.1,
            theta: 0.1,
            tau: 0.99,
            use_predicate_correlation: true,
            use_balancing_factor: true,
            use_hard_negative_set: true,
            momentum: MomentumTerms::default(),
        }
    }
}

impl LossConfig {
    pub fn with_mode(mode: LossMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [("alpha", self.alpha), ("beta", self.beta), ("xi", self.xi)];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid("loss config", format!("{name} must be > 0, got {v}")));
            }
        }
        let nonneg = [("delta", self.delta), ("gamma", self.gamma), ("theta", self.theta)];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid("loss config", format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::invalid("loss config", format!("tau must lie in [0, 1], got {}", self.tau)));
        }
        if self.k_hard == 0 {
            return Err(Error::invalid("loss config", "k_hard must be >= 1"));
        }
        Ok(())
    }

    /// Effective hard-set size for `classes` classes.
    fn hard_set_size(&self, classes: usize) -> Result<usize> {
        if self.use_hard_negative_set {
            if self.k_hard > classes - 1 {
                return Err(Error::KOutOfRange {
                    k: self.k_hard,
                    max: classes - 1,
                });
            }
            Ok(self.k_hard)
        } else {
            Ok(classes - 1)
        }
    }
}

/// Frequency-only pair weight: `mu^alpha` when the negative is more frequent, else 1.
pub fn frequency_weight(mu: f64, alpha: f64) -> f64 {
    if mu > 1.0 {
        mu.powf(alpha)
    } else {
        1.0
    }
}

/// Four-case correlation-aware pair weight for `mu = n_j / n_i` and `phi = s_ij / s_ii`.
pub fn pairwise_weight(mu: f64, phi: f64, cfg: &LossConfig) -> f64 {
    let hard = phi > cfg.xi;
    match (mu >= 1.0, hard) {
        (true, true) => mu.powf(cfg.beta),
        (true, false) | (false, true) => 1.0,
        (false, false) => mu.powf(cfg.alpha),
    }
}

/// Pairwise re-weighting factors `w[i][j]` with the inputs that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTable {
    classes: usize,
    w: Vec<f64>,
    mu: Vec<f64>,
    phi: Option<Vec<f64>>,
}

impl WeightTable {
    /// All weights one: the table that reduces every re-weighted loss to plain softmax.
    pub fn uniform(classes: usize) -> Self {
        Self {
            classes,
            w: vec![1.0; classes * classes],
            mu: vec![1.0; classes * classes],
            phi: None,
        }
    }

    /// Frequency-only weights.
    pub fn frequency(dist: &ClassDistribution, alpha: f64) -> Self {
        let c = dist.num_classes();
        let mut w = vec![1.0; c * c];
        let mut mu = vec![1.0; c * c];
        for i in 0..c {
            for j in 0..c {
                if i != j {
                    let m = dist.ratio(i, j);
                    mu[i * c + j] = m;
                    w[i * c + j] = frequency_weight(m, alpha);
                }
            }
        }
        Self {
            classes: c,
            w,
            mu,
            phi: None,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.w[i * self.classes + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.w[i * self.classes..(i + 1) * self.classes]
    }

    pub fn mu(&self, i: usize, j: usize) -> f64 {
        self.mu[i * self.classes + j]
    }

    pub fn phi(&self, i: usize, j: usize) -> Option<f64> {
        self.phi.as_ref().map(|p| p[i * self.classes + j])
    }

    /// Dumps `i,j,mu,phi,w`; `phi` is blank when the table ignores correlations.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record(["i", "j", "mu", "phi", "w"])?;
        for i in 0..self.classes {
            for j in 0..self.classes {
                let phi = self.phi(i, j).map(|p| p.to_string()).unwrap_or_default();
                out.write_record([
                    i.to_string(),
                    j.to_string(),
                    self.mu(i, j).to_string(),
                    phi,
                    self.get(i, j).to_string(),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Builds the pairwise weight table; falls back to [`WeightTable::frequency`] when
/// `use_predicate_correlation` is off.
pub fn weight_table(dist: &ClassDistribution, lat: &Lattice, cfg: &LossConfig) -> Result<WeightTable> {
    let c = dist.num_classes();
    if lat.num_classes() != c {
        return Err(Error::DimensionMismatch {
            expected: c,
            got: lat.num_classes(),
        });
    }
    if !cfg.use_predicate_correlation {
        return Ok(WeightTable::frequency(dist, cfg.alpha));
    }
    let mut w = vec![1.0; c * c];
    let mut mu = vec![1.0; c * c];
    let mut phi = vec![1.0; c * c];
    for i in 0..c {
        for j in 0..c {
            if i == j {
                continue;
            }
            let m = dist.ratio(i, j);
            let p = lat.correlation_ratio(i, j)?;
            mu[i * c + j] = m;
            phi[i * c + j] = p;
            w[i * c + j] = pairwise_weight(m, p, cfg);
        }
    }
    Ok(WeightTable {
        classes: c,
        w,
        mu,
        phi: Some(phi),
    })
}

/// A loss value with its gradient with respect to the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Vec<f64>,
}

impl LossValue {
    fn zero(classes: usize) -> Self {
        Self {
            value: 0.0,
            grad: vec![0.0; classes],
        }
    }

    /// `self + scale * other`, values and gradients alike.
    pub fn add_scaled(mut self, other: &LossValue, scale: f64) -> Self {
        self.value += scale * other.value;
        for (g, o) in self.grad.iter_mut().zip(&other.grad) {
            *g += scale * o;
        }
        self
    }
}

/// Shared pieces of a re-weighted softmax: `ln Z`, `phi_hat = e^eta / Z` and
/// `q = w * phi_hat`, all computed after subtracting the max logit.
struct Reweighted {
    shifted: Vec<f64>,
    log_z: f64,
    hat: Vec<f64>,
    q: Vec<f64>,
}

impl Reweighted {
    fn new(eta: &[f64], w_row: &[f64]) -> Self {
        let max = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let shifted: Vec<f64> = eta.iter().map(|e| e - max).collect();
        let exp: Vec<f64> = shifted.iter().map(|s| s.exp()).collect();
        let z: f64 = exp.iter().zip(w_row).map(|(e, w)| e * w).sum();
        let hat: Vec<f64> = exp.iter().map(|e| e / z).collect();
        let q = hat.iter().zip(w_row).map(|(h, w)| h * w).collect();
        Self {
            shifted,
            log_z: z.ln(),
            hat,
            q,
        }
    }

    fn log_hat(&self, k: usize) -> f64 {
        self.shifted[k] - self.log_z
    }
}

fn check_logits(eta: &[f64], label: usize, classes: usize) -> Result<()> {
    if eta.len() != classes {
        return Err(Error::DimensionMismatch {
            expected: classes,
            got: eta.len(),
        });
    }
    if label >= classes {
        return Err(Error::ClassOutOfRange {
            index: label,
            classes,
        });
    }
    Ok(())
}

/// Numerically stable softmax.
pub fn softmax(eta: &[f64]) -> Vec<f64> {
    let max = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = eta.iter().map(|e| (e - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / z).collect()
}

/// `phi_hat_k = e^{eta_k} / sum_j w[i][j] e^{eta_j}` for positive class `i`.
///
/// The result only sums to one when every weight in row `i` is one.
pub fn reweighted_probs(eta: &[f64], positive: usize, w: &WeightTable) -> Result<Vec<f64>> {
    check_logits(eta, positive, w.num_classes())?;
    Ok(Reweighted::new(eta, w.row(positive)).hat)
}

fn cdl_kernel(rw: &Reweighted, label: usize) -> LossValue {
    let mut grad = rw.q.clone();
    grad[label] -= 1.0;
    LossValue {
        value: -rw.log_hat(label),
        grad,
    }
}

fn als_kernel(rw: &Reweighted, soft_row: &[f64]) -> LossValue {
    let mass: f64 = soft_row.iter().sum();
    let value = -soft_row
        .iter()
        .enumerate()
        .map(|(k, s)| s * rw.log_hat(k))
        .sum::<f64>();
    let grad = rw.q.iter().zip(soft_row).map(|(q, s)| mass * q - s).collect();
    LossValue { value, grad }
}

/// Hinge over `probs` (either plain softmax or re-weighted) against `hard_set`.
///
/// `q` is `w * probs` for the same weight row; for plain softmax pass `probs` twice.
fn hinge_kernel(
    probs: &[f64],
    q: &[f64],
    label: usize,
    hard_set: &[usize],
    balance: impl Fn(usize) -> f64,
    delta: f64,
) -> LossValue {
    let c = probs.len();
    let scale = 1.0 / hard_set.len() as f64;
    let mut value = 0.0;
    // d loss / d probs
    let mut g = vec![0.0; c];
    for &j in hard_set {
        let margin = probs[j] - probs[label] + delta;
        if margin > 0.0 {
            let b = balance(j) * scale;
            value += margin * b;
            g[j] += b;
            g[label] -= b;
        }
    }
    if value == 0.0 {
        return LossValue::zero(c);
    }
    let dot: f64 = g.iter().zip(probs).map(|(g, p)| g * p).sum();
    let grad = (0..c).map(|l| g[l] * probs[l] - q[l] * dot).collect();
    LossValue { value, grad }
}

fn check_hard_set(hard_set: &[usize], label: usize, classes: usize) -> Result<()> {
    if hard_set.is_empty() {
        return Err(Error::EmptyHardSet(label));
    }
    for &j in hard_set {
        if j >= classes {
            return Err(Error::ClassOutOfRange { index: j, classes });
        }
        if j == label {
            return Err(Error::invalid(
                "hard-negative set",
                format!("contains the positive class {label}"),
            ));
        }
    }
    Ok(())
}

fn balance_fn<'a>(dist: &'a ClassDistribution, label: usize, cfg: &LossConfig) -> impl Fn(usize) -> f64 + 'a {
    let on = cfg.use_balancing_factor;
    move |j| if on { dist.ratio(label, j) } else { 1.0 }
}

/// Plain softmax cross-entropy.
pub fn cross_entropy(eta: &[f64], label: usize) -> Result<LossValue> {
    let c = eta.len();
    check_logits(eta, label, c)?;
    Ok(cdl_kernel(&Reweighted::new(eta, &vec![1.0; c]), label))
}

/// Re-weighted cross-entropy `-ln phi_hat_label` against a prepared table.
pub fn reweighted_cross_entropy(eta: &[f64], label: usize, w: &WeightTable) -> Result<LossValue> {
    check_logits(eta, label, w.num_classes())?;
    Ok(cdl_kernel(&Reweighted::new(eta, w.row(label)), label))
}

/// Category discriminating loss with weights from `(dist, lat, cfg)`.
pub fn cdl(
    eta: &[f64],
    label: usize,
    dist: &ClassDistribution,
    lat: &Lattice,
    cfg: &LossConfig,
) -> Result<LossValue> {
    let w = weight_table(dist, lat, cfg)?;
    reweighted_cross_entropy(eta, label, &w)
}

/// Label-softening term `-sum_k soft_row[k] ln phi_hat_k`.
pub fn als(eta: &[f64], label: usize, soft_row: &[f64], w: &WeightTable) -> Result<LossValue> {
    check_logits(eta, label, w.num_classes())?;
    if soft_row.len() != eta.len() {
        return Err(Error::DimensionMismatch {
            expected: eta.len(),
            got: soft_row.len(),
        });
    }
    Ok(als_kernel(&Reweighted::new(eta, w.row(label)), soft_row))
}

/// `cdl + theta * als`, both against the refined lattice.
pub fn cdl_a(
    eta: &[f64],
    label: usize,
    dist: &ClassDistribution,
    state: &AdaptiveLattice,
    cfg: &LossConfig,
) -> Result<LossValue> {
    let lat = state.current();
    let w = weight_table(dist, lat, cfg)?;
    check_logits(eta, label, w.num_classes())?;
    let rw = Reweighted::new(eta, w.row(label));
    Ok(cdl_kernel(&rw, label).add_scaled(&als_kernel(&rw, lat.row(label)), cfg.theta))
}

/// Entity discriminating hinge on plain softmax probabilities against a fixed hard set.
pub fn edl(
    eta: &[f64],
    label: usize,
    hard_set: &[usize],
    dist: &ClassDistribution,
    cfg: &LossConfig,
) -> Result<LossValue> {
    let c = dist.num_classes();
    check_logits(eta, label, c)?;
    check_hard_set(hard_set, label, c)?;
    let p = softmax(eta);
    Ok(hinge_kernel(&p, &p, label, hard_set, balance_fn(dist, label, cfg), cfg.delta))
}

/// Hard set for `label`: top-k correlated classes of `lat`, or every negative
/// when `use_hard_negative_set` is off.
pub fn hard_negative_set(lat: &Lattice, label: usize, cfg: &LossConfig) -> Result<Vec<usize>> {
    let c = lat.num_classes();
    if cfg.use_hard_negative_set {
        lat.topk_correlated(label, cfg.hard_set_size(c)?)
    } else {
        Ok((0..c).filter(|&j| j != label).collect())
    }
}

/// Adaptive entity hinge on re-weighted probabilities against the current top-k set.
pub fn edl_a(
    eta: &[f64],
    label: usize,
    state: &AdaptiveLattice,
    dist: &ClassDistribution,
    cfg: &LossConfig,
) -> Result<LossValue> {
    let lat = state.current();
    let w = weight_table(dist, lat, cfg)?;
    check_logits(eta, label, w.num_classes())?;
    let hard = hard_negative_set(lat, label, cfg)?;
    let rw = Reweighted::new(eta, w.row(label));
    Ok(hinge_kernel(&rw.hat, &rw.q, label, &hard, balance_fn(dist, label, cfg), cfg.delta))
}

/// The loss selected by `cfg.mode` for one sample.
///
/// `state` supplies the lattice: static modes read `state.initial()`, adaptive
/// modes read `state.current()`. Modes without a lattice ignore it.
pub fn combined(
    eta: &[f64],
    label: usize,
    dist: &ClassDistribution,
    state: &AdaptiveLattice,
    cfg: &LossConfig,
) -> Result<LossValue> {
    let obj = Objective::new(cfg, dist, Some(state))?;
    obj.sample_loss(eta, label)
}

/// [`combined`] with everything that only depends on the lattice precomputed.
///
/// Rebuild it whenever the adaptive lattice moves.
#[derive(Debug, Clone)]
pub struct Objective {
    cfg: LossConfig,
    dist: ClassDistribution,
    weights: WeightTable,
    soft_targets: Option<Lattice>,
    hard_sets: Option<Vec<Vec<usize>>>,
}

impl Objective {
    pub fn new(cfg: &LossConfig, dist: &ClassDistribution, state: Option<&AdaptiveLattice>) -> Result<Self> {
        cfg.validate()?;
        let c = dist.num_classes();
        let lattice = match (cfg.mode.needs_lattice(), state) {
            (false, _) => None,
            (true, None) => {
                return Err(Error::invalid(
                    "objective",
                    format!("mode {} needs a lattice", cfg.mode),
                ))
            }
            (true, Some(s)) if cfg.mode.is_adaptive() => Some(s.current()),
            (true, Some(s)) => Some(s.initial()),
        };
        let weights = match (cfg.mode, lattice) {
            (LossMode::Ce, _) => WeightTable::uniform(c),
            (LossMode::Reweight, _) => WeightTable::frequency(dist, cfg.alpha),
            (_, Some(lat)) => weight_table(dist, lat, cfg)?,
            (_, None) => unreachable!("lattice presence checked above"),
        };
        let soft_targets = match cfg.mode {
            LossMode::CdlA | LossMode::FgplA => lattice.cloned(),
            _ => None,
        };
        let hard_sets = match (cfg.mode, lattice) {
            (LossMode::Fgpl | LossMode::FgplA, Some(lat)) => Some(
                (0..c)
                    .map(|i| hard_negative_set(lat, i, cfg))
                    .collect::<Result<Vec<_>>>()?,
            ),
            _ => None,
        };
        Ok(Self {
            cfg: cfg.clone(),
            dist: dist.clone(),
            weights,
            soft_targets,
            hard_sets,
        })
    }

    pub fn mode(&self) -> LossMode {
        self.cfg.mode
    }

    pub fn weights(&self) -> &WeightTable {
        &self.weights
    }

    pub fn hard_set(&self, class: usize) -> Option<&[usize]> {
        self.hard_sets.as_ref().map(|h| h[class].as_slice())
    }

    pub fn sample_loss(&self, eta: &[f64], label: usize) -> Result<LossValue> {
        check_logits(eta, label, self.dist.num_classes())?;
        let rw = Reweighted::new(eta, self.weights.row(label));
        let mut loss = cdl_kernel(&rw, label);
        if let Some(lat) = &self.soft_targets {
            loss = loss.add_scaled(&als_kernel(&rw, lat.row(label)), self.cfg.theta);
        }
        if let Some(sets) = &self.hard_sets {
            let balance = balance_fn(&self.dist, label, &self.cfg);
            let hinge = if self.cfg.mode.is_adaptive() {
                hinge_kernel(&rw.hat, &rw.q, label, &sets[label], balance, self.cfg.delta)
            } else {
                let p = softmax(eta);
                hinge_kernel(&p, &p, label, &sets[label], balance, self.cfg.delta)
            };
            loss = loss.add_scaled(&hinge, self.cfg.gamma);
        }
        Ok(loss)
    }

    /// Mean loss over a batch and the per-sample gradients of that mean.
    pub fn batch_loss<L: AsRef<[f64]>>(&self, logits: &[L], labels: &[usize]) -> Result<(f64, Vec<Vec<f64>>)> {
        if logits.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: labels.len(),
                got: logits.len(),
            });
        }
        if logits.is_empty() {
            return Err(Error::EmptyDataset("batch has no samples"));
        }
        let scale = 1.0 / logits.len() as f64;
        let mut total = 0.0;
        let mut grads = Vec::with_capacity(logits.len());
        for (eta, &label) in logits.iter().zip(labels) {
            let mut l = self.sample_loss(eta.as_ref(), label)?;
            total += l.value;
            l.grad.iter_mut().for_each(|g| *g *= scale);
            grads.push(l.grad);
        }
        Ok((total * scale, grads))
    }
}
