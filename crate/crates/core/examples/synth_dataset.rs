//! Draws the synthetic benchmark dataset and writes it as a TSV plus manifest.
//!
//! ```text
//! cargo run --release --example synth_dataset -- [out_dir] [seed]
//! ```

use std::path::PathBuf;

use lhcf::dataset::{load_dataset, save_dataset, Split};
use lhcf::metrics::average_purity;
use lhcf::synth::{generate, SynthSpec};

fn main() -> lhcf::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "target/synth".into()));
    let seed = args.next().map(|s| s.parse().expect("seed must be an integer")).unwrap_or(0);

    let spec = SynthSpec::benchmark(seed);
    let synth = generate(&spec)?;
    let ds = &synth.dataset;

    let manifest = out.join("benchmark.manifest.json");
    save_dataset(ds, &manifest, &out.join("benchmark.tsv"))?;
    assert_eq!(&load_dataset(&manifest)?, ds);

    println!("{} records, d = {}, {} generating cohorts", ds.len(), ds.d, spec.k_true);
    for split in [Split::Train, Split::Val, Split::Test] {
        println!("  {:5} {}", split.as_str(), ds.indices(split).len());
    }
    println!("cohort  size  positive rate");
    for c in 0..spec.k_true {
        let ys: Vec<u8> = ds.records.iter().zip(&synth.cohorts).filter(|(_, &k)| k == c).map(|(r, _)| r.y).collect();
        let rate = ys.iter().map(|&y| f64::from(y)).sum::<f64>() / ys.len() as f64;
        println!("  {c:4}  {:4}  {rate:.3}", ys.len());
    }
    for attr in ds.visible_attributes() {
        let values: Vec<usize> = ds.records.iter().map(|r| r.attrs[&attr.name]).collect();
        println!("average purity of cohorts w.r.t. {}: {:.3}", attr.name, average_purity(&synth.cohorts, &values));
    }
    println!("wrote {}", manifest.display());
    Ok(())
}
