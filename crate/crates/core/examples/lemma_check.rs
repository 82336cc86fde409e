//! Checks that no union of disjoint clusters has a higher risk than the
//! worst single cluster, using per-cohort risks of a trained head.
//!
//! ```text
//! cargo run --release --example lemma_check
//! ```

use lhcf::clustering::{cluster_dataset, ClusterConfig};
use lhcf::dataset::{GroupLabels, Split};
use lhcf::metrics::evaluate;
use lhcf::synth::{generate, lemma1_check, ClusterRisk, SynthSpec};
use lhcf::trainer::{train, Architecture, FairnessConfig, TrainHyper};

fn main() -> lhcf::Result<()> {
    let ds = generate(&SynthSpec::benchmark(4))?.dataset;
    let (cohorts, _) = cluster_dataset(&ds, &ClusterConfig::default())?;
    let (model, _) = train(&ds, None, &FairnessConfig::erm(), &TrainHyper::default(), Architecture::Linear)?;
    let report = evaluate(&ds, &model, Some(&GroupLabels::from(&cohorts)), &[], Split::Test)?;

    let clusters: Vec<ClusterRisk> = report
        .cohort_risks
        .expect("cohorts were supplied")
        .into_iter()
        .map(|c| ClusterRisk {
            risk: c.risk,
            count: c.count,
        })
        .collect();
    let r = lemma1_check(&clusters)?;
    for (k, c) in clusters.iter().enumerate() {
        println!("cohort{k}: risk {:.4} over {} records", c.risk, c.count);
    }
    let (worst_subset, worst_union) = r
        .union_risks
        .iter()
        .enumerate()
        .map(|(i, &v)| (i + 1, v))
        .filter(|(mask, _)| mask.count_ones() > 1)
        .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
    println!("{} subsets checked; max single risk {:.4}", r.union_risks.len(), r.max_risk);
    if worst_subset > 0 {
        println!("riskiest union of two or more cohorts (mask {worst_subset:#b}): {worst_union:.4}");
    }
    println!("max violation {:e}: {}", r.max_violation, if r.holds { "holds" } else { "violated" });
    Ok(())
}
