//! Runs every variant of the standard benchmark over a few seeds and prints a table.
//!
//! cargo run --release -p fgpl-core --example benchmark -- [seeds] [epochs] [spec.json]

use std::time::Instant;

use fgpl_core::data::SyntheticSpec;
use fgpl_core::experiment::{benchmark_seed, standard_variants};
use fgpl_core::TrainConfig;

fn main() -> fgpl_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seeds: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let base = TrainConfig::default();
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(base.epochs);
    let spec = match args.get(3) {
        Some(path) => SyntheticSpec::from_json(&std::fs::read_to_string(path)?)?,
        None => SyntheticSpec::standard(),
    };
    let cfg = TrainConfig {
        epochs,
        ..base
    };
    let variants = standard_variants();
    println!(
        "{:>4} {:<12} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}",
        "seed", "variant", "acc", "mR", "head", "body", "tail", "spread", "dp@10"
    );
    let start = Instant::now();
    for seed in 0..seeds {
        let res = benchmark_seed(&spec, &cfg, &variants, seed)?;
        for (name, r) in &res.reports {
            let g = &r.group_recall;
            println!(
                "{:>4} {:<12} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4}",
                seed,
                name,
                r.accuracy,
                r.mean_recall,
                g.head.unwrap_or(f64::NAN),
                g.body.unwrap_or(f64::NAN),
                g.tail.unwrap_or(f64::NAN),
                g.spread(),
                r.dp(10).unwrap_or(f64::NAN)
            );
        }
        println!();
    }
    eprintln!("elapsed: {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
