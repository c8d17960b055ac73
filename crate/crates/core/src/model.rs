//! Small softmax classifier and the SGD loop that drives lattice refinement.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::lattice::{AdaptiveLattice, BatchPredictions, ClassDistribution, Lattice};
use crate::losses::{softmax, LossConfig, LossMode, Objective};
use crate::metrics::{recall_report, EvalReport, ReportConfig};

const INIT_RANGE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
struct Hidden {
    units: usize,
    /// `input_dim x units`, row-major.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

/// Linear softmax head, optionally behind one `tanh` hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    input_dim: usize,
    classes: usize,
    hidden: Option<Hidden>,
    /// `(hidden units or input_dim) x classes`, row-major.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

/// Activations kept from a forward pass for backprop.
struct Trace {
    hidden: Option<Vec<f64>>,
    logits: Vec<f64>,
}

impl Classifier {
    /// Weights drawn from `uniform(-0.1, 0.1)`, biases zero.
    pub fn new(input_dim: usize, classes: usize, hidden_units: Option<usize>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(-INIT_RANGE..INIT_RANGE)).collect()
        };
        let hidden = hidden_units.map(|h| Hidden {
            units: h,
            weights: draw(input_dim * h),
            bias: vec![0.0; h],
        });
        let fan_in = hidden_units.unwrap_or(input_dim);
        Self {
            input_dim,
            classes,
            hidden,
            weights: draw(fan_in * classes),
            bias: vec![0.0; classes],
        }
    }

    pub fn zeros(input_dim: usize, classes: usize) -> Self {
        Self {
            input_dim,
            classes,
            hidden: None,
            weights: vec![0.0; input_dim * classes],
            bias: vec![0.0; classes],
        }
    }

    /// Linear classifier with explicit `input_dim x classes` weights.
    pub fn linear(weights: Vec<Vec<f64>>, bias: Vec<f64>) -> Result<Self> {
        let classes = bias.len();
        let input_dim = weights.len();
        if let Some(r) = weights.iter().find(|r| r.len() != classes) {
            return Err(Error::DimensionMismatch {
                expected: classes,
                got: r.len(),
            });
        }
        Ok(Self {
            input_dim,
            classes,
            hidden: None,
            weights: weights.concat(),
            bias,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn hidden_units(&self) -> Option<usize> {
        self.hidden.as_ref().map(|h| h.units)
    }

    pub fn forward(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                got: features.len(),
            });
        }
        Ok(self.trace(features).logits)
    }

    fn trace(&self, x: &[f64]) -> Trace {
        let hidden = self.hidden.as_ref().map(|h| {
            let mut a = h.bias.clone();
            for (d, xd) in x.iter().enumerate() {
                let row = &h.weights[d * h.units..(d + 1) * h.units];
                for (acc, w) in a.iter_mut().zip(row) {
                    *acc += xd * w;
                }
            }
            a.iter_mut().for_each(|v| *v = v.tanh());
            a
        });
        let input = hidden.as_deref().unwrap_or(x);
        let mut logits = self.bias.clone();
        for (d, xd) in input.iter().enumerate() {
            let row = &self.weights[d * self.classes..(d + 1) * self.classes];
            for (acc, w) in logits.iter_mut().zip(row) {
                *acc += xd * w;
            }
        }
        Trace { hidden, logits }
    }

    /// Softmax probabilities for every sample, paired with the labels.
    pub fn predict(&self, data: &Dataset) -> Result<BatchPredictions> {
        if data.num_classes() != self.classes {
            return Err(Error::DimensionMismatch {
                expected: self.classes,
                got: data.num_classes(),
            });
        }
        let probs = data
            .samples()
            .iter()
            .map(|s| self.forward(&s.features).map(|eta| softmax(&eta)))
            .collect::<Result<Vec<_>>>()?;
        BatchPredictions::new(probs, data.labels(), self.classes)
    }

    /// All parameters flattened: hidden weights, hidden bias, head weights, head bias.
    fn is_finite(&self) -> bool {
        self.params().iter().all(|v| v.is_finite())
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::new();
        if let Some(h) = &self.hidden {
            p.extend(&h.weights);
            p.extend(&h.bias);
        }
        p.extend(&self.weights);
        p.extend(&self.bias);
        p
    }

    pub fn from_params(
        input_dim: usize,
        classes: usize,
        hidden_units: Option<usize>,
        params: &[f64],
    ) -> Result<Self> {
        let fan_in = hidden_units.unwrap_or(input_dim);
        let expected =
            hidden_units.map_or(0, |h| input_dim * h + h) + fan_in * classes + classes;
        if params.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: params.len(),
            });
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("checkpoint", "non-finite parameter"));
        }
        let mut rest = params;
        let mut take = |n: usize| {
            let (head, tail) = rest.split_at(n);
            rest = tail;
            head.to_vec()
        };
        let hidden = hidden_units.map(|h| Hidden {
            units: h,
            weights: take(input_dim * h),
            bias: take(h),
        });
        Ok(Self {
            input_dim,
            classes,
            hidden,
            weights: take(fan_in * classes),
            bias: take(classes),
        })
    }

    /// One SGD step given per-sample logit gradients.
    fn sgd_step(&mut self, inputs: &[&[f64]], traces: &[Trace], dlogits: &[Vec<f64>], lr: f64) {
        let c = self.classes;
        let mut g_w = vec![0.0; self.weights.len()];
        let mut g_b = vec![0.0; c];
        let mut g_hidden = self
            .hidden
            .as_ref()
            .map(|h| (vec![0.0; h.weights.len()], vec![0.0; h.units]));
        for ((x, tr), dl) in inputs.iter().zip(traces).zip(dlogits) {
            let a = tr.hidden.as_deref().unwrap_or(x);
            for (d, ad) in a.iter().enumerate() {
                let row = &mut g_w[d * c..(d + 1) * c];
                for (g, dv) in row.iter_mut().zip(dl) {
                    *g += ad * dv;
                }
            }
            for (g, dv) in g_b.iter_mut().zip(dl) {
                *g += dv;
            }
            if let (Some(h), Some((gw, gb)), Some(act)) = (&self.hidden, g_hidden.as_mut(), &tr.hidden) {
                for u in 0..h.units {
                    let back: f64 = (0..c).map(|k| self.weights[u * c + k] * dl[k]).sum();
                    let delta = back * (1.0 - act[u] * act[u]);
                    gb[u] += delta;
                    for (d, xd) in x.iter().enumerate() {
                        gw[d * h.units + u] += xd * delta;
                    }
                }
            }
        }
        for (w, g) in self.weights.iter_mut().zip(&g_w) {
            *w -= lr * g;
        }
        for (b, g) in self.bias.iter_mut().zip(&g_b) {
            *b -= lr * g;
        }
        if let (Some(h), Some((gw, gb))) = (self.hidden.as_mut(), g_hidden) {
            for (w, g) in h.weights.iter_mut().zip(&gw) {
                *w -= lr * g;
            }
            for (b, g) in h.bias.iter_mut().zip(&gb) {
                *b -= lr * g;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub hidden_units: Option<usize>,
    /// Apply batch refinement to the adaptive lattice after every step.
    pub refine: bool,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            batch_size: 16,
            epochs: 15,
            seed: 0,
            hidden_units: None,
            refine: true,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid("train config", "learning_rate must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("train config", "batch_size must be >= 1"));
        }
        if self.hidden_units == Some(0) {
            return Err(Error::invalid("train config", "hidden_units must be >= 1"));
        }
        self.loss.validate()
    }

    pub fn mode(&self) -> LossMode {
        self.loss.mode
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub classifier: Classifier,
    /// Lattice state after training; `None` for modes without a lattice.
    pub lattice: Option<AdaptiveLattice>,
    /// One report per epoch on the evaluation split.
    pub trail: Vec<EvalReport>,
    pub steps: u64,
}

/// Evaluates `clf` on `data`, grouping classes by the training distribution `dist`.
pub fn evaluate(
    clf: &Classifier,
    data: &Dataset,
    dist: &ClassDistribution,
    cfg: &ReportConfig,
) -> Result<EvalReport> {
    recall_report(&clf.predict(data)?, dist, cfg)
}

/// Mini-batch SGD on `data` under `cfg.loss`.
///
/// Per batch: forward, loss, SGD step, then (adaptive modes with `refine` on)
/// one refinement of the lattice from that batch's pre-step probabilities.
/// `eval` selects the split the per-epoch trail is measured on (defaults to `data`).
pub fn train(
    clf: Classifier,
    data: &Dataset,
    cfg: &TrainConfig,
    initial: Option<&Lattice>,
    eval: Option<&Dataset>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if clf.input_dim() != data.feature_dim() || clf.num_classes() != data.num_classes() {
        return Err(Error::DimensionMismatch {
            expected: clf.input_dim() * clf.num_classes(),
            got: data.feature_dim() * data.num_classes(),
        });
    }
    let dist = data.distribution()?;
    let mode = cfg.mode();
    let mut state = match (mode.needs_lattice(), initial) {
        (true, None) => {
            return Err(Error::invalid("train", format!("mode {mode} needs an initial lattice")))
        }
        (_, Some(lat)) => {
            if lat.num_classes() != data.num_classes() {
                return Err(Error::DimensionMismatch {
                    expected: data.num_classes(),
                    got: lat.num_classes(),
                });
            }
            Some(AdaptiveLattice::with_terms(lat.clone(), cfg.loss.tau, cfg.loss.momentum)?)
        }
        (false, None) => None,
    };
    let refine = cfg.refine && mode.is_adaptive();
    let mut objective = Objective::new(&cfg.loss, &dist, state.as_ref())?;
    let eval = eval.unwrap_or(data);
    let report_cfg = ReportConfig::default();

    let mut clf = clf;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trail = Vec::with_capacity(cfg.epochs);
    let mut steps = 0u64;
    let samples = data.samples();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let inputs: Vec<&[f64]> = chunk.iter().map(|&i| samples[i].features.as_slice()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| samples[i].label).collect();
            let traces: Vec<Trace> = inputs.iter().map(|x| clf.trace(x)).collect();
            let logits: Vec<&[f64]> = traces.iter().map(|t| t.logits.as_slice()).collect();
            let (loss, grads) = objective.batch_loss(&logits, &labels)?;
            if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::NumericalFailure {
                    epoch,
                    batch,
                    reason: format!("loss evaluated to {loss}"),
                });
            }
            let probs: Option<Vec<Vec<f64>>> =
                refine.then(|| logits.iter().map(|eta| softmax(eta)).collect());
            clf.sgd_step(&inputs, &traces, &grads, cfg.learning_rate);
            steps += 1;
            if !clf.is_finite() {
                return Err(Error::NumericalFailure {
                    epoch,
                    batch,
                    reason: "parameters overflowed after the update".into(),
                });
            }
            if let (Some(probs), Some(state)) = (probs, state.as_mut()) {
                let preds = BatchPredictions::new(probs, labels, data.num_classes())?;
                state.refine_step(&preds)?;
                objective = Objective::new(&cfg.loss, &dist, Some(state))?;
            }
        }
        trail.push(evaluate(&clf, eval, &dist, &report_cfg)?);
    }
    Ok(TrainOutcome {
        classifier: clf,
        lattice: state,
        trail,
        steps,
    })
}

/// Serialized classifier parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub input_dim: usize,
    pub classes: usize,
    pub hidden_units: Option<usize>,
    pub params: Vec<f64>,
    pub seed: u64,
    pub steps: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<LossMode>,
}

impl Checkpoint {
    pub fn new(clf: &Classifier, seed: u64, steps: u64, mode: Option<LossMode>) -> Self {
        Self {
            input_dim: clf.input_dim(),
            classes: clf.num_classes(),
            hidden_units: clf.hidden_units(),
            params: clf.params(),
            seed,
            steps,
            mode,
        }
    }

    pub fn classifier(&self) -> Result<Classifier> {
        Classifier::from_params(self.input_dim, self.classes, self.hidden_units, &self.params)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Self = serde_json::from_str(text)?;
        ckpt.classifier()?;
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Sample;

    fn separable(n: usize) -> Dataset {
        let samples = (0..n)
            .map(|i| {
                let label = i % 2;
                let sign = if label == 0 { -1.0 } else { 1.0 };
                let jitter = (i as f64 * 0.37).sin() * 0.5;
                Sample {
                    features: vec![sign * (1.0 + jitter.abs()), jitter],
                    context: 0,
                    label,
                }
            })
            .collect();
        Dataset::new(samples, 2).unwrap()
    }

    #[test]
    fn zero_model_gives_zero_logits() {
        let clf = Classifier::zeros(3, 4);
        assert_eq!(clf.forward(&[1.0, -2.0, 0.5]).unwrap(), vec![0.0; 4]);
        assert!(matches!(
            clf.forward(&[1.0]),
            Err(Error::DimensionMismatch { expected: 3, got: 1 })
        ));
    }

    #[test]
    fn unit_feature_selects_weight_row() {
        let clf = Classifier::linear(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.0, 0.0]).unwrap();
        assert_eq!(clf.forward(&[1.0, 0.0]).unwrap(), vec![1.0, 0.0]);
        let clf = Classifier::linear(vec![vec![2.0, -3.0], vec![0.5, 4.0]], vec![0.0, 0.0]).unwrap();
        assert_eq!(clf.forward(&[1.0, 0.0]).unwrap(), vec![2.0, -3.0]);
    }

    #[test]
    fn params_roundtrip() {
        for hidden in [None, Some(5)] {
            let clf = Classifier::new(4, 3, hidden, 11);
            let back = Classifier::from_params(4, 3, hidden, &clf.params()).unwrap();
            assert_eq!(back, clf);
            let ckpt = Checkpoint::new(&clf, 11, 7, Some(LossMode::Cdl));
            assert_eq!(Checkpoint::from_json(&ckpt.to_json().unwrap()).unwrap(), ckpt);
        }
        assert!(Classifier::from_params(4, 3, None, &[0.0; 3]).is_err());
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let data = separable(20);
        let clf = Classifier::new(2, 2, None, 1);
        let lat = Lattice::identity(2);
        let cfg = TrainConfig {
            epochs: 0,
            loss: LossConfig {
                k_hard: 1,
                ..LossConfig::default()
            },
            ..TrainConfig::default()
        };
        let out = train(clf.clone(), &data, &cfg, Some(&lat), None).unwrap();
        assert_eq!(out.classifier, clf);
        assert_eq!(out.lattice.unwrap().step(), 0);
        assert!(out.trail.is_empty());
    }

    #[test]
    fn ce_separates_separable_data() {
        let data = separable(40);
        let cfg = TrainConfig {
            epochs: 100,
            loss: LossConfig::with_mode(LossMode::Ce),
            ..TrainConfig::default()
        };
        let out = train(Classifier::new(2, 2, None, 3), &data, &cfg, None, None).unwrap();
        assert_eq!(out.trail.last().unwrap().accuracy, 1.0);
        assert_eq!(out.steps, 100 * 3);
    }

    #[test]
    fn hidden_layer_trains_too() {
        let data = separable(40);
        let cfg = TrainConfig {
            epochs: 60,
            hidden_units: Some(4),
            learning_rate: 0.1,
            loss: LossConfig::with_mode(LossMode::Ce),
            ..TrainConfig::default()
        };
        let out = train(Classifier::new(2, 2, Some(4), 3), &data, &cfg, None, None).unwrap();
        assert_eq!(out.trail.last().unwrap().accuracy, 1.0);
    }

    #[test]
    fn lattice_required_for_lattice_modes() {
        let data = separable(10);
        let cfg = TrainConfig {
            loss: LossConfig::with_mode(LossMode::Fgpl),
            ..TrainConfig::default()
        };
        assert!(train(Classifier::new(2, 2, None, 0), &data, &cfg, None, None).is_err());
    }

    #[test]
    fn nan_aborts_with_batch_index() {
        let data = separable(10);
        let mut clf = Classifier::new(2, 2, None, 0);
        clf.bias[0] = f64::NAN;
        let cfg = TrainConfig {
            loss: LossConfig::with_mode(LossMode::Ce),
            ..TrainConfig::default()
        };
        match train(clf, &data, &cfg, None, None) {
            Err(Error::NumericalFailure { epoch: 0, batch: 0, .. }) => {}
            other => panic!("expected numerical failure, got {other:?}"),
        }
    }
}
