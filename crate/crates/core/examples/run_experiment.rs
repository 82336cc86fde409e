//! Runs a reduced benchmark grid (seeds x methods x partitions) and writes
//! reports, the results table, rank tests and CD diagrams.
//!
//! ```text
//! cargo run --release --example run_experiment -- [out_dir] [n_seeds]
//! ```

use std::path::PathBuf;

use lhcf::experiment::{benchmark_config, run_experiment};

fn main() -> lhcf::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "target/experiment".into()));
    let n: u64 = args.next().map(|s| s.parse().expect("n_seeds must be an integer")).unwrap_or(3);

    let cfg = benchmark_config((0..n).collect());
    let observer = |name: &str, v: serde_json::Value| {
        if name == "seed_prepared" || name == "warning" {
            eprintln!("{name}: {v}");
        }
    };
    let results = run_experiment(&cfg, &observer)?;
    let written = results.write(&out, &observer)?;

    let summary = results.summary();
    println!("{:<14} {:>8} {:>8} {:>8}", "method", "AUC", "min AUC", "gap");
    for (label, metrics) in &summary.methods {
        let m = |k: &str| metrics.get(k).map_or(f64::NAN, |s| s.mean);
        println!("{label:<14} {:8.4} {:8.4} {:8.4}", m("overall_auc"), m("min_auc"), m("auc_gap"));
    }
    println!("wrote {} files under {}", written.len(), out.display());
    Ok(())
}
