//! Friedman test with Nemenyi post-hoc on a method-by-setting score table,
//! written as a critical-difference diagram.
//!
//! ```text
//! cargo run --release --example compare_methods -- [scores.tsv] [out.svg]
//! ```
//!
//! Without arguments a built-in table is used.

use std::path::Path;

use lhcf::io::{read_to_string, write_atomic};
use lhcf::stats::{cd_diagram, friedman, parse_score_tsv, Direction};

const TABLE: &str = "\
setting\tERM\tClassic\tLHCF\tDAC
s1\t0.71\t0.74\t0.77\t0.75
s2\t0.66\t0.70\t0.72\t0.70
s3\t0.80\t0.79\t0.83\t0.82
s4\t0.62\t0.66\t0.70\t0.64
s5\t0.75\t0.76\t0.78\t0.79
s6\t0.69\t0.71\t0.74\t0.70
s7\t0.73\t0.72\t0.77\t0.74
s8\t0.64\t0.69\t0.71\t0.68
";

fn main() -> lhcf::Result<()> {
    let mut args = std::env::args().skip(1);
    let text = match args.next() {
        Some(p) => read_to_string(Path::new(&p))?,
        None => TABLE.to_string(),
    };
    let out = args.next().unwrap_or_else(|| "target/cd.svg".into());

    let table = parse_score_tsv(&text, None, Direction::Higher)?;
    let r = friedman(&table, 0.05)?;
    println!("{} methods over {} settings", r.methods.len(), r.settings.len());
    for (m, rank) in r.methods.iter().zip(&r.average_ranks) {
        println!("  {m:<10} {rank:.3}");
    }
    println!(
        "chi2_F = {:.3} (df {}), p = {:.4}, critical {:.3}: {}",
        r.friedman_statistic,
        r.df,
        r.p_value,
        r.critical_value,
        if r.significant { "significant" } else { "not significant" }
    );
    if let Some(cd) = r.cd {
        println!("critical difference {cd:.4}");
    }
    for g in &r.groups {
        println!("  indistinguishable: {}", g.join(", "));
    }
    write_atomic(Path::new(&out), cd_diagram(&r).as_bytes())?;
    println!("wrote {out}");
    Ok(())
}
