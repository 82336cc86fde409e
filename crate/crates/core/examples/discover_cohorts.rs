//! Recovers hidden cohorts with a BIC sweep over Gaussian mixtures and
//! compares them with the generating cohorts.
//!
//! ```text
//! cargo run --release --example discover_cohorts
//! ```

use lhcf::clustering::{cluster_dataset, ClusterConfig};
use lhcf::synth::{generate, SynthSpec};

fn main() -> lhcf::Result<()> {
    let synth = generate(&SynthSpec::benchmark(1))?;
    let ds = &synth.dataset;
    let cfg = ClusterConfig {
        k_max: 10,
        restarts: 3,
        ..ClusterConfig::default()
    };
    let (cohorts, sweep) = cluster_dataset(ds, &cfg)?;

    println!("   K           BIC");
    for c in &sweep.candidates {
        let mark = if c.k == sweep.selected { "  <- selected" } else { "" };
        println!("{:4}  {:12.1}{mark}", c.k, c.bic);
    }
    for (k, why) in &sweep.failures {
        println!("K = {k} failed: {why}");
    }

    // Contingency table of discovered against generating cohorts.
    let k_true = synth.cohorts.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0usize; k_true]; cohorts.k_star];
    for (r, &truth) in ds.records.iter().zip(&synth.cohorts) {
        table[cohorts.hard_labels[&r.id]][truth] += 1;
    }
    println!("\ndiscovered x generating cohort counts");
    for (k, row) in table.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|n| format!("{n:5}")).collect();
        println!("cohort{k}: {}", cells.join(""));
    }
    let agree: usize = table.iter().map(|row| row.iter().max().copied().unwrap_or(0)).sum();
    println!("majority agreement: {:.3}", agree as f64 / ds.len() as f64);
    Ok(())
}
