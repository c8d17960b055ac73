//! `fgpl`: generate data, train any loss mode, build lattices, evaluate, tabulate.
//!
//! Exit codes: 0 ok, 1 usage, 2 data/validation, 3 numerical failure.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use fgpl_core::data::{self, Dataset, SyntheticSpec};
use fgpl_core::experiment::{run, DEFAULT_HOLDOUT};
use fgpl_core::lattice::Accumulation;
use fgpl_core::metrics::ReportConfig;
use fgpl_core::model::evaluate;
use fgpl_core::{build_lattice, Checkpoint, EvalReport, Lattice, LossMode, TrainConfig};

const SEED_ENV: &str = "FGPL_SEED";

#[derive(Parser)]
#[command(name = "fgpl", version, about = "Correlation-aware long-tail training on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset CSV from a spec (`standard` for the shipped benchmark).
    GenData(GenData),
    /// Train one loss mode; writes a checkpoint, the final lattice and a held-out report.
    Train(Train),
    /// Build a lattice from a checkpoint's predictions on a dataset.
    BuildLattice(BuildLattice),
    /// Evaluate a checkpoint and write an EvalReport JSON.
    Eval(Eval),
    /// Collect EvalReport JSON files under a directory into one CSV.
    Report(Report),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    spec: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    mode: Option<LossMode>,
    /// TrainConfig JSON; flags given here override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Initial lattice; lattice modes without one train a CE baseline first.
    #[arg(long)]
    lattice: Option<PathBuf>,
    /// Where to write the final lattice [default: <out>.lattice.json].
    #[arg(long)]
    lattice_out: Option<PathBuf>,
    /// Where to write the held-out report [default: <out>.report.json].
    #[arg(long)]
    report_out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    /// Share of each class held out for the report.
    #[arg(long, default_value_t = DEFAULT_HOLDOUT)]
    holdout: f64,
}

#[derive(Args)]
struct BuildLattice {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Count argmax predictions instead of accumulating probabilities.
    #[arg(long)]
    hard: bool,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Discriminatory-power cutoffs [default: 5,10,20 where they fit].
    #[arg(long, value_delimiter = ',')]
    dp: Option<Vec<usize>>,
    /// Head,body,tail group sizes [default: near-equal thirds].
    #[arg(long, value_delimiter = ',')]
    groups: Option<Vec<usize>>,
}

#[derive(Args)]
struct Report {
    #[arg(long)]
    runs: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Raised for malformed invocations that clap cannot catch itself.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<Usage>().is_some() {
            return 1;
        }
        if let Some(fgpl_core::Error::NumericalFailure { .. }) = cause.downcast_ref::<fgpl_core::Error>() {
            return 3;
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::BuildLattice(a) => build_lattice_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// `FGPL_SEED` wins over `--seed`, which wins over whatever the caller falls back to.
fn resolve_seed(flag: Option<u64>) -> anyhow::Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer")).into()),
        Err(_) => Ok(flag),
    }
}

fn read_text(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_data(path: &Path, classes: Option<usize>) -> anyhow::Result<Dataset> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Dataset::read_csv(std::io::BufReader::new(file), classes).with_context(|| format!("loading {}", path.display()))
}

fn load_checkpoint(path: &Path) -> anyhow::Result<Checkpoint> {
    Checkpoint::from_json(&read_text(path)?).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn load_lattice(path: &Path) -> anyhow::Result<Lattice> {
    Lattice::from_json(&read_text(path)?).with_context(|| format!("loading lattice {}", path.display()))
}

/// `dir/name.json` -> `dir/name.<suffix>.json`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}.json"))
}

fn write_lattice(path: &Path, lattice: &Lattice) -> anyhow::Result<()> {
    write_text(path, &lattice.to_json()?)?;
    load_lattice(path)?;
    Ok(())
}

fn write_report(path: &Path, report: &EvalReport) -> anyhow::Result<()> {
    write_text(path, &serde_json::to_string_pretty(report)?)?;
    serde_json::from_str::<EvalReport>(&read_text(path)?).with_context(|| format!("validating {}", path.display()))?;
    Ok(())
}

fn gen_data(a: GenData) -> anyhow::Result<()> {
    let mut spec = if a.spec == "standard" {
        SyntheticSpec::standard()
    } else {
        SyntheticSpec::from_json(&read_text(Path::new(&a.spec))?).with_context(|| format!("spec {}", a.spec))?
    };
    if let Some(seed) = resolve_seed(a.seed)? {
        spec.seed = seed;
    }
    let dataset = data::generate(&spec)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    data::save_csv(&dataset, &a.out)?;
    let back = load_data(&a.out, Some(spec.classes))?;
    if back.len() != dataset.len() {
        bail!("{} holds {} samples, expected {}", a.out.display(), back.len(), dataset.len());
    }
    let counts: Vec<String> = dataset.class_counts().iter().map(u64::to_string).collect();
    println!(
        "wrote {} samples ({} classes, seed {}) to {}",
        dataset.len(),
        spec.classes,
        spec.seed,
        a.out.display()
    );
    println!("class counts: {}", counts.join(" "));
    Ok(())
}

/// Built-in defaults, then the config file, then individual flags.
fn train_config(a: &Train) -> anyhow::Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(path) => serde_json::from_str::<TrainConfig>(&read_text(path)?)
            .with_context(|| format!("parsing config {}", path.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(mode) = a.mode {
        cfg.loss.mode = mode;
    }
    if let Some(seed) = resolve_seed(a.seed)? {
        cfg.seed = seed;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.learning_rate = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    if a.hidden.is_some() {
        cfg.hidden_units = a.hidden;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: Train) -> anyhow::Result<()> {
    let cfg = train_config(&a)?;
    let dataset = load_data(&a.data, None)?;
    let (train_data, heldout) = dataset.stratified_split(a.holdout, cfg.seed)?;
    let initial = a.lattice.as_deref().map(load_lattice).transpose()?;
    let mode = cfg.mode();
    if initial.is_none() && mode.needs_lattice() {
        eprintln!("no --lattice given; training a cross-entropy baseline first");
    }
    let result = run(&train_data, &heldout, &cfg, initial.as_ref(), &ReportConfig::default())?;

    let ckpt = Checkpoint::new(&result.outcome.classifier, cfg.seed, result.outcome.steps, Some(mode));
    write_text(&a.out, &ckpt.to_json()?)?;
    load_checkpoint(&a.out)?;

    // Modes without a lattice still emit one, from the trained model's own
    // training-split predictions, so a CE run can seed a later lattice run.
    let lattice = match result.final_lattice() {
        Some(l) => l.clone(),
        None => build_lattice(&result.outcome.classifier.predict(&train_data)?, Accumulation::Soft)?,
    };
    let lattice_path = a.lattice_out.clone().unwrap_or_else(|| sibling(&a.out, "lattice"));
    write_lattice(&lattice_path, &lattice)?;

    let report_path = a.report_out.clone().unwrap_or_else(|| sibling(&a.out, "report"));
    write_report(&report_path, &result.report)?;

    let r = &result.report;
    println!(
        "{mode}: {} steps, held-out accuracy {:.4}, mean recall {:.4}, dp@10 {}",
        result.outcome.steps,
        r.accuracy,
        r.mean_recall,
        r.dp(10).map_or("n/a".into(), |v| format!("{v:.4}"))
    );
    println!(
        "wrote {}, {}, {}",
        a.out.display(),
        lattice_path.display(),
        report_path.display()
    );
    Ok(())
}

fn build_lattice_cmd(a: BuildLattice) -> anyhow::Result<()> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let dataset = load_data(&a.data, Some(ckpt.classes))?;
    let preds = ckpt.classifier()?.predict(&dataset)?;
    let mode = if a.hard { Accumulation::Hard } else { Accumulation::Soft };
    let lattice = build_lattice(&preds, mode)?;
    write_lattice(&a.out, &lattice)?;
    println!("wrote {}-class lattice to {}", lattice.num_classes(), a.out.display());
    Ok(())
}

fn eval(a: Eval) -> anyhow::Result<()> {
    let group_sizes = match a.groups.as_deref() {
        None => None,
        Some(&[h, b, t]) => Some([h, b, t]),
        Some(other) => return Err(Usage(format!("--groups needs three sizes, got {}", other.len())).into()),
    };
    let ckpt = load_checkpoint(&a.ckpt)?;
    let dataset = load_data(&a.data, Some(ckpt.classes))?;
    let cfg = ReportConfig {
        dp_ks: a.dp,
        group_sizes,
    };
    let mut report = evaluate(&ckpt.classifier()?, &dataset, &dataset.distribution()?, &cfg)?;
    report.mode = ckpt.mode.map(|m| m.to_string());
    write_report(&a.report, &report)?;
    let dp: Vec<String> = report.dp.iter().map(|(k, v)| format!("dp@{k} {v:.4}")).collect();
    println!(
        "accuracy {:.4}, mean recall {:.4}, {}",
        report.accuracy,
        report.mean_recall,
        dp.join(", ")
    );
    Ok(())
}

fn collect_reports(dir: &Path, found: &mut Vec<(PathBuf, EvalReport)>) -> anyhow::Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    entries.sort();
    for path in entries {
        if path.is_dir() {
            collect_reports(&path, found)?;
        } else if path.extension().is_some_and(|e| e == "json") {
            // Checkpoints and lattices share the directory; only reports parse.
            if let Ok(r) = serde_json::from_str::<EvalReport>(&read_text(&path)?) {
                found.push((path, r));
            }
        }
    }
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn report(a: Report) -> anyhow::Result<()> {
    if !a.runs.is_dir() {
        bail!("{} is not a directory", a.runs.display());
    }
    let mut found = Vec::new();
    collect_reports(&a.runs, &mut found)?;
    if found.is_empty() {
        bail!("no EvalReport JSON files under {}", a.runs.display());
    }
    let ks: BTreeSet<usize> = found.iter().flat_map(|(_, r)| r.dp.keys().copied()).collect();
    let classes: BTreeSet<usize> = found.iter().map(|(_, r)| r.per_class_recall.len()).collect();
    let per_class = if classes.len() == 1 { classes.first().copied().unwrap_or(0) } else { 0 };

    let mut header: Vec<String> = [
        "run",
        "mode",
        "samples",
        "accuracy",
        "mean_recall",
        "group_recall.head",
        "group_recall.body",
        "group_recall.tail",
        "group_recall.mean",
        "group_recall.spread",
    ]
    .map(String::from)
    .to_vec();
    header.extend(ks.iter().map(|k| format!("dp.{k}")));
    header.extend((0..per_class).map(|c| format!("per_class_recall.{c}")));

    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for (path, r) in &found {
        let name = path.strip_prefix(&a.runs).unwrap_or(path).display().to_string();
        let g = &r.group_recall;
        let mut row = vec![
            name.replace(',', "_"),
            r.mode.clone().unwrap_or_default(),
            r.samples.to_string(),
            r.accuracy.to_string(),
            r.mean_recall.to_string(),
            opt(g.head),
            opt(g.body),
            opt(g.tail),
            g.mean.to_string(),
            g.spread().to_string(),
        ];
        let dp: &BTreeMap<usize, f64> = &r.dp;
        row.extend(ks.iter().map(|k| opt(dp.get(k).copied())));
        row.extend(r.per_class_recall.iter().take(per_class).map(|v| opt(*v)));
        out.push_str(&row.join(","));
        out.push('\n');
    }
    write_text(&a.out, &out)?;
    println!("wrote {} runs to {}", found.len(), a.out.display());
    Ok(())
}
