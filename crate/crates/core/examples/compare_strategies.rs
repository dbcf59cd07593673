//! Runs every selection strategy over a range of seeds on a run config and
//! prints the final target accuracies.
//!
//! ```text
//! cargo run --release --example compare_strategies -- [config.json] [seeds]
//! ```

use std::time::Instant;

use adose::harness::{run_active_loop, RunConfig, Strategy};

fn main() -> adose::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let base = match args.get(1) {
        Some(p) => RunConfig::from_file(p.as_ref())?,
        None => RunConfig::default(),
    };
    let seeds: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(5);
    let strategies = [Strategy::Adose, Strategy::Random, Strategy::Entropy, Strategy::LusOnly, Strategy::MdcOnly];
    let mut sums = [0.0; 5];
    println!("{:>4} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}", "seed", "initial", "adose", "random", "entropy", "lus", "mdc");
    for seed in 0..seeds {
        let mut row = Vec::new();
        let mut initial = 0.0;
        for (i, s) in strategies.iter().enumerate() {
            let cfg = RunConfig { seed, strategy: *s, out_dir: None, ..base.clone() };
            let t = Instant::now();
            let report = run_active_loop(&cfg)?;
            let acc = report.final_accuracy().unwrap_or(f64::NAN);
            initial = report.metrics.initial.map_or(f64::NAN, |m| m.accuracy);
            sums[i] += acc;
            row.push(acc);
            log::info!("{} seed {seed}: {acc:.4} in {:.1?}", s.name(), t.elapsed());
        }
        println!(
            "{seed:>4} {initial:>8.4} {}",
            row.iter().map(|a| format!("{a:>8.4}")).collect::<Vec<_>>().join(" ")
        );
    }
    println!(
        "mean          {}",
        sums.iter().map(|s| format!("{:>8.4}", s / seeds as f64)).collect::<Vec<_>>().join(" ")
    );
    Ok(())
}
