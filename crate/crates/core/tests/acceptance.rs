//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.
//!
//! Run with `cargo test -p fgpl-core --test acceptance` (add `--release` for a
//! faster end-to-end benchmark).

mod common;

use std::time::{Duration, Instant};

use fgpl_core::data::{generate, SyntheticSpec};
use fgpl_core::experiment::{benchmark_seed, run, standard_variants, SeedResult, DEFAULT_HOLDOUT};
use fgpl_core::lattice::{build_lattice, Accumulation, AdaptiveLattice, BatchPredictions, ClassDistribution};
use fgpl_core::losses::{
    als, cdl, cdl_a, combined, edl, edl_a, hard_negative_set, pairwise_weight, weight_table, LossConfig, LossMode,
    LossValue,
};
use fgpl_core::metrics::{dp_at_k, ConfusionMatrix, ReportConfig};
use fgpl_core::model::Checkpoint;
use fgpl_core::{EvalReport, TrainConfig};
use rand::Rng;

use common::*;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 1

/// The four-case weight, written out branch by branch.
fn case_table(mu: f64, phi: f64, xi: f64, alpha: f64, beta: f64) -> f64 {
    if mu >= 1.0 {
        if phi > xi {
            mu.powf(beta)
        } else {
            1.0
        }
    } else if phi > xi {
        1.0
    } else {
        mu.powf(alpha)
    }
}

fn criterion_1() -> Outcome {
    let cfg = LossConfig::default();
    let start = Instant::now();
    let mut points = 0;
    let mut mismatches = 0;
    // 40 log-spaced mu in [0.01, 100] (mu = 1 lands on the grid) x 25 phi in [0, 2]
    // that includes phi = xi exactly.
    for a in 0..40 {
        let mu = 10f64.powf(-2.0 + 4.0 * a as f64 / 39.0);
        let mu = if a == 20 { 1.0 } else { mu };
        for b in 0..25 {
            let phi = if b == 11 { cfg.xi } else { 2.0 * b as f64 / 24.0 };
            points += 1;
            let got = pairwise_weight(mu, phi, &cfg);
            let want = case_table(mu, phi, cfg.xi, cfg.alpha, cfg.beta);
            if got.to_bits() != want.to_bits() {
                mismatches += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    check(
        points == 1000 && mismatches == 0 && elapsed < Duration::from_secs(1),
        format!("{points} grid points, {mismatches} mismatches, {elapsed:.2?}"),
    )
}

// ---------------------------------------------------------------- 2

const H: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
const KINK_MARGIN: f64 = 1e-3;

struct Draw {
    eta: Vec<f64>,
    label: usize,
    dist: ClassDistribution,
    state: AdaptiveLattice,
    cfg: LossConfig,
}

fn draw(rng: &mut impl Rng, mode: LossMode) -> Draw {
    let c = rng.random_range(3..8);
    let mut state = AdaptiveLattice::new(lattice(rng, c), 0.9).unwrap();
    for _ in 0..3 {
        state.refine_step(&batch(rng, c, 8)).unwrap();
    }
    Draw {
        eta: logits(rng, c),
        label: rng.random_range(0..c),
        dist: distribution(rng, c),
        state,
        cfg: LossConfig {
            k_hard: rng.random_range(1..c),
            ..LossConfig::with_mode(mode)
        },
    }
}

/// True when a hinge term of `d` sits within `KINK_MARGIN` of its kink.
fn near_kink(d: &Draw, adaptive: bool) -> bool {
    let lat = if adaptive { d.state.current() } else { d.state.initial() };
    let hard = hard_negative_set(lat, d.label, &d.cfg).unwrap();
    let p = if adaptive {
        let w = weight_table(&d.dist, lat, &d.cfg).unwrap();
        reweighted(&d.eta, w.row(d.label))
    } else {
        softmax(&d.eta)
    };
    kink_distance(&p, d.label, &hard, d.cfg.delta) < KINK_MARGIN
}

fn grad_check(
    name: &str,
    seed: u64,
    mode: LossMode,
    hinge: Option<bool>,
    loss: impl Fn(&Draw, &[f64]) -> LossValue,
) -> (String, bool) {
    let mut rng = rng(seed);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    while checked < 200 {
        let d = draw(&mut rng, mode);
        if hinge.is_some_and(|adaptive| near_kink(&d, adaptive)) {
            continue;
        }
        let analytic = loss(&d, &d.eta).grad;
        let numeric = central_diff(|x| loss(&d, x).value, &d.eta, H);
        worst = worst.max(rel_err(&analytic, &numeric));
        checked += 1;
    }
    (format!("{name} {worst:.1e}"), worst <= GRAD_TOL)
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let results = [
        grad_check("cdl", 21, LossMode::Cdl, None, |d, x| {
            cdl(x, d.label, &d.dist, d.state.initial(), &d.cfg).unwrap()
        }),
        grad_check("als", 22, LossMode::CdlA, None, |d, x| {
            let lat = d.state.current();
            let w = weight_table(&d.dist, lat, &d.cfg).unwrap();
            als(x, d.label, lat.row(d.label), &w).unwrap()
        }),
        grad_check("cdl-a", 23, LossMode::CdlA, None, |d, x| {
            cdl_a(x, d.label, &d.dist, &d.state, &d.cfg).unwrap()
        }),
        grad_check("edl", 24, LossMode::Fgpl, Some(false), |d, x| {
            let hard = hard_negative_set(d.state.initial(), d.label, &d.cfg).unwrap();
            edl(x, d.label, &hard, &d.dist, &d.cfg).unwrap()
        }),
        grad_check("edl-a", 25, LossMode::FgplA, Some(true), |d, x| {
            edl_a(x, d.label, &d.state, &d.dist, &d.cfg).unwrap()
        }),
        grad_check("combined[fgpl]", 26, LossMode::Fgpl, Some(false), |d, x| {
            combined(x, d.label, &d.dist, &d.state, &d.cfg).unwrap()
        }),
        grad_check("combined[fgpl-a]", 27, LossMode::FgplA, Some(true), |d, x| {
            combined(x, d.label, &d.dist, &d.state, &d.cfg).unwrap()
        }),
    ];
    let elapsed = start.elapsed();
    let ok = results.iter().all(|(_, ok)| *ok) && elapsed < Duration::from_secs(10);
    let detail: Vec<&str> = results.iter().map(|(s, _)| s.as_str()).collect();
    check(
        ok,
        format!("200 points each, worst rel err: {}; {elapsed:.2?}", detail.join(", ")),
    )
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Outcome {
    let mut rng = rng(3);
    let mut worst: f64 = 0.0;
    for n in 0..1000 {
        let c = rng.random_range(2..10);
        let count = rng.random_range(1..1000);
        let dist = ClassDistribution::new(vec![count; c]).unwrap();
        let state = AdaptiveLattice::new(lattice(&mut rng, c), 0.99).unwrap();
        let mode = if n % 2 == 0 { LossMode::FgplA } else { LossMode::Fgpl };
        let cfg = LossConfig {
            use_predicate_correlation: false,
            theta: 0.0,
            gamma: 0.0,
            k_hard: 1,
            ..LossConfig::with_mode(mode)
        };
        let eta = logits(&mut rng, c);
        let label = rng.random_range(0..c);
        let got = combined(&eta, label, &dist, &state, &cfg).unwrap().value;
        let ce = log_sum_exp(&eta) - eta[label];
        worst = worst.max((got - ce).abs());
    }
    check(worst <= 1e-12, format!("1000 inputs, max |combined - ce| = {worst:.1e}"))
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Outcome {
    let mut rng = rng(4);
    let c = 6;
    let mut worst: f64 = 0.0;
    let mut state = AdaptiveLattice::new(lattice(&mut rng, c), 0.5).unwrap();
    for _ in 0..1000 {
        let tau = rng.random_range(0.0..=1.0);
        let mut next = AdaptiveLattice::new(state.current().clone(), tau).unwrap();
        let m = rng.random_range(1..12);
        next.refine_step(&batch(&mut rng, c, m)).unwrap();
        for i in 0..c {
            worst = worst.max((next.current().row(i).iter().sum::<f64>() - 1.0).abs());
        }
        state = next;
    }
    // Same check on one long-lived state at the default blend.
    let mut long = AdaptiveLattice::new(lattice(&mut rng, c), 0.99).unwrap();
    for _ in 0..1000 {
        let m = rng.random_range(1..12);
        long.refine_step(&batch(&mut rng, c, m)).unwrap();
        for i in 0..c {
            worst = worst.max((long.current().row(i).iter().sum::<f64>() - 1.0).abs());
        }
    }
    let stochastic = worst < 1e-9;

    let initial = lattice(&mut rng, c);
    let bits = |l: &fgpl_core::Lattice| l.to_rows().concat().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let mut frozen = AdaptiveLattice::new(initial.clone(), 1.0).unwrap();
    for _ in 0..1000 {
        let m = rng.random_range(1..12);
        frozen.refine_step(&batch(&mut rng, c, m)).unwrap();
    }
    let stable = bits(frozen.current()) == bits(&initial);

    let fresh = AdaptiveLattice::new(initial.clone(), 0.99).unwrap();
    let at_zero = fresh.step() == 0 && bits(fresh.current()) == bits(&initial);

    check(
        stochastic && stable && at_zero,
        format!(
            "max |row sum - 1| = {worst:.1e} over 2000 steps; tau=1 bitwise stable: {stable}; t=0 equals initial: {at_zero}"
        ),
    )
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Outcome {
    let mut identity_ok = true;
    let mut uniform_ok = true;
    for c in [2usize, 5, 20, 50] {
        let eye: Vec<Vec<f64>> = (0..c)
            .map(|i| (0..c).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let flat = vec![vec![1.0 / c as f64; c]; c];
        let eye = ConfusionMatrix::from_normalized(&eye).unwrap();
        let flat = ConfusionMatrix::from_normalized(&flat).unwrap();
        for k in 1..c {
            identity_ok &= (dp_at_k(&eye, k).unwrap() - 1.0).abs() < 1e-12;
            uniform_ok &= dp_at_k(&flat, k).unwrap().abs() < 1e-12;
        }
    }
    let fixture = ConfusionMatrix::from_normalized(&[vec![0.8, 0.2], vec![0.1, 0.9]]).unwrap();
    let dp = dp_at_k(&fixture, 1).unwrap();
    let fixture_ok = (dp - 0.7).abs() <= 1e-9;
    check(
        identity_ok && uniform_ok && fixture_ok,
        format!("identity -> 1: {identity_ok}; uniform -> 0: {uniform_ok}; 2x2 fixture K=1 -> {dp:.12}"),
    )
}

// ---------------------------------------------------------------- 6

/// Argmax counts per label, diagonal floored at 1e-6, rows renormalized.
fn counting_oracle(probs: &[Vec<f64>], labels: &[usize], c: usize) -> Vec<Vec<f64>> {
    let mut counts = vec![vec![0.0; c]; c];
    for (p, &y) in probs.iter().zip(labels) {
        let mut best = 0;
        for j in 1..c {
            if p[j] > p[best] {
                best = j;
            }
        }
        counts[y][best] += 1.0;
    }
    for (i, row) in counts.iter_mut().enumerate() {
        let n: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= n);
        if row[i] < 1e-6 {
            row[i] = 1e-6;
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
    counts
}

fn criterion_6() -> Outcome {
    let mut rng = rng(6);
    let mut worst: f64 = 0.0;
    let fixtures = 500;
    for _ in 0..fixtures {
        let c = rng.random_range(2..7);
        let n = rng.random_range(c..=100);
        // Every class appears: the first c labels are a permutation prefix.
        let labels: Vec<usize> = (0..n).map(|m| if m < c { m } else { rng.random_range(0..c) }).collect();
        let probs: Vec<Vec<f64>> = (0..n).map(|_| simplex(&mut rng, c)).collect();
        let oracle = counting_oracle(&probs, &labels, c);
        let preds = BatchPredictions::new(probs, labels, c).unwrap();
        let lat = build_lattice(&preds, Accumulation::Hard).unwrap();
        for (i, row) in oracle.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                worst = worst.max((lat.get(i, j) - v).abs());
            }
        }
    }
    check(
        worst <= 1e-12,
        format!("{fixtures} fixtures of <= 100 samples, max deviation {worst:.1e}"),
    )
}

// ---------------------------------------------------------------- 7, 8

fn benchmark() -> (Vec<SeedResult>, Duration) {
    let spec = SyntheticSpec::standard();
    let cfg = TrainConfig::default();
    let variants = standard_variants();
    let start = Instant::now();
    let results = (0..5)
        .map(|seed| benchmark_seed(&spec, &cfg, &variants, seed).unwrap())
        .collect();
    (results, start.elapsed())
}

fn dp10(r: &EvalReport) -> f64 {
    r.dp(10).expect("dp@10 reported")
}

fn criterion_7(results: &[SeedResult], elapsed: Duration) -> Outcome {
    let mut ordered = 0;
    let mut spread_ok = 0;
    let mut lines = Vec::new();
    for res in results {
        let get = |n: &str| res.report(n).unwrap();
        let (ce, rw, fgpl, fgpl_a) = (get("ce"), get("reweight"), get("fgpl"), get("fgpl-a"));
        let holds = |f: fn(&EvalReport) -> f64| f(ce) < f(rw) && f(ce) < f(fgpl) && f(fgpl) <= f(fgpl_a);
        if holds(|r| r.mean_recall) && holds(dp10) {
            ordered += 1;
        }
        if fgpl_a.group_recall.spread() < ce.group_recall.spread() {
            spread_ok += 1;
        }
        lines.push(format!(
            "seed {}: mR {:.3}/{:.3}/{:.3}/{:.3} dp10 {:.3}/{:.3}/{:.3}/{:.3}",
            res.seed,
            ce.mean_recall,
            rw.mean_recall,
            fgpl.mean_recall,
            fgpl_a.mean_recall,
            dp10(ce),
            dp10(rw),
            dp10(fgpl),
            dp10(fgpl_a)
        ));
    }
    let n = results.len();
    check(
        ordered >= 4 && spread_ok == n && elapsed < Duration::from_secs(300),
        format!(
            "ordering on {ordered}/{n} seeds, spread narrower on {spread_ok}/{n}, {elapsed:.1?} (ce/reweight/fgpl/fgpl-a)\n        {}",
            lines.join("\n        ")
        ),
    )
}

fn criterion_8(results: &[SeedResult]) -> Outcome {
    let lower = |name: &str| {
        results
            .iter()
            .filter(|r| dp10(r.report(name).unwrap()) < dp10(r.report("fgpl").unwrap()))
            .count()
    };
    let (pc, bf) = (lower("fgpl-no-pc"), lower("fgpl-no-bf"));
    let n = results.len();
    check(
        2 * pc > n && 2 * bf > n,
        format!("dp@10 below full fgpl without correlation on {pc}/{n}, without balancing on {bf}/{n}"),
    )
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Outcome {
    let spec = SyntheticSpec::standard();
    let once = || {
        let data = generate(&spec).unwrap();
        let (train, heldout) = data.stratified_split(DEFAULT_HOLDOUT, spec.seed).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            loss: LossConfig::with_mode(LossMode::FgplA),
            ..TrainConfig::default()
        };
        let result = run(&train, &heldout, &cfg, None, &ReportConfig::default()).unwrap();
        let ckpt = Checkpoint::new(&result.outcome.classifier, cfg.seed, result.outcome.steps, Some(cfg.mode()));
        (
            ckpt.to_json().unwrap(),
            result.final_lattice().unwrap().to_json().unwrap(),
            serde_json::to_string(&result.report).unwrap(),
        )
    };
    let (a, b) = (once(), once());
    check(
        a == b,
        format!(
            "checkpoint identical: {}, lattice identical: {}, report identical: {}",
            a.0 == b.0,
            a.1 == b.1,
            a.2 == b.2
        ),
    )
}

fn main() {
    let mut failed = 0;
    let mut report = |id: u32, name: &str, outcome: Outcome| {
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("[{tag}] {id}. {name}: {detail}");
    };
    report(1, "pair-weight case table", criterion_1());
    report(2, "gradient suite", criterion_2());
    report(3, "reduction to cross-entropy", criterion_3());
    report(4, "batch refinement invariants", criterion_4());
    report(5, "discriminatory power fixtures", criterion_5());
    report(6, "hard lattice vs counting oracle", criterion_6());
    let (results, elapsed) = benchmark();
    report(7, "end-to-end ordering", criterion_7(&results, elapsed));
    report(8, "ablation directions", criterion_8(&results));
    report(9, "bitwise reproducibility", criterion_9());
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}
