//! Evaluates a trained head on the test split: overall AUC, per-group AUCs
//! and the fairness summary for each visible partition and for the
//! discovered cohorts.
//!
//! ```text
//! cargo run --release --example evaluate_fairness
//! ```

use lhcf::clustering::{cluster_dataset, ClusterConfig};
use lhcf::dataset::{intersect_attributes, GroupLabels, Split};
use lhcf::metrics::evaluate;
use lhcf::synth::{generate, SynthSpec};
use lhcf::trainer::{train, Architecture, FairnessConfig, TrainHyper};

fn main() -> lhcf::Result<()> {
    let ds = generate(&SynthSpec::benchmark(3))?.dataset;
    let (cohorts, _) = cluster_dataset(&ds, &ClusterConfig::default())?;
    let (model, _) = train(&ds, None, &FairnessConfig::erm(), &TrainHyper::default(), Architecture::Linear)?;

    let partitions = vec![
        intersect_attributes(&ds, &["gender"])?,
        intersect_attributes(&ds, &["age"])?,
        intersect_attributes(&ds, &["gender", "age"])?,
    ];
    let report = evaluate(&ds, &model, Some(&GroupLabels::from(&cohorts)), &partitions, Split::Test)?;

    println!("test: n = {}, AUC {:.4}, Brier {:.4}", report.overall.n, report.overall.auc, report.overall.brier);
    println!("{:<12} {:>7} {:>7} {:>7} {:>8} {:>8}", "partition", "min", "gap", "ES-AUC", "meanPSD", "maxPSD");
    for (name, f) in &report.fairness {
        println!(
            "{name:<12} {:7.4} {:7.4} {:7.4} {:8.4} {:8.4}",
            f.min_auc, f.auc_gap, f.es_auc, f.mean_psd, f.max_psd
        );
    }
    if let Some(q) = &report.cohort_quality {
        for (attr, ap) in &q.average_purity {
            println!("average purity of discovered cohorts w.r.t. {attr}: {ap:.3}");
        }
    }
    for e in &report.exclusions {
        println!("excluded {} / {}: {}", e.partition, e.group, e.reason);
    }
    Ok(())
}
