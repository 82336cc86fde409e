//! Trains a linear head with plain ERM and with the worst-cohort and
//! cohort-gap objectives over discovered cohorts.
//!
//! ```text
//! cargo run --release --example train_fair_head -- [lambda]
//! ```

use lhcf::clustering::{cluster_dataset, ClusterConfig};
use lhcf::dataset::GroupLabels;
use lhcf::synth::{generate, SynthSpec};
use lhcf::trainer::{train, Architecture, FairnessConfig, Grouping, LossKind, TrainHyper};

fn main() -> lhcf::Result<()> {
    let lambda: f64 = std::env::args().nth(1).map(|s| s.parse().expect("lambda must be a number")).unwrap_or(1.0);
    let ds = generate(&SynthSpec::benchmark(2))?.dataset;
    let (cohorts, _) = cluster_dataset(
        &ds,
        &ClusterConfig {
            k_max: 10,
            restarts: 3,
            ..ClusterConfig::default()
        },
    )?;
    let groups = GroupLabels::from(&cohorts);
    println!("training over {} discovered cohorts, lambda = {lambda}", cohorts.k_star);

    let hyper = TrainHyper::default();
    for kind in [LossKind::None, LossKind::Worst, LossKind::Gap] {
        let cfg = FairnessConfig {
            loss_kind: kind,
            lambda: if kind == LossKind::None { 0.0 } else { lambda },
            grouping: Grouping::HiddenCohorts,
        };
        let (_, report) = train(&ds, Some(&groups), &cfg, &hyper, Architecture::Linear)?;
        let best = report.epochs.iter().find(|e| e.epoch == report.best_epoch).expect("best epoch is recorded");
        let risks: Vec<String> = best.group_risks.iter().map(|r| r.map_or("-".into(), |v| format!("{v:.3}"))).collect();
        println!(
            "{kind:?}: best epoch {:3}, val AUC {:.4}, cohort risks [{}]",
            report.best_epoch,
            report.best_val_auc,
            risks.join(" ")
        );
    }
    Ok(())
}
