//! Rank-based comparison of methods across settings: Friedman test,
//! Nemenyi critical difference and CD diagrams.

pub mod q_table;

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Higher,
    Lower,
}

impl FromStr for Direction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "higher" | "higher-better" => Ok(Direction::Higher),
            "lower" | "lower-better" => Ok(Direction::Lower),
            _ => Err(Error::InvalidArgument(format!(
                "direction must be `higher` or `lower`, got `{s}`"
            ))),
        }
    }
}

/// Scores of `methods` (columns) over `settings` (rows).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub methods: Vec<String>,
    pub settings: Vec<String>,
    pub scores: Vec<Vec<f64>>,
    pub direction: Direction,
}

impl ScoreTable {
    pub fn new(
        methods: Vec<String>,
        settings: Vec<String>,
        scores: Vec<Vec<f64>>,
        direction: Direction,
    ) -> Result<Self> {
        let t = ScoreTable {
            methods,
            settings,
            scores,
            direction,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.methods.len();
        let n = self.settings.len();
        if k < 2 || n < 2 {
            return Err(Error::InvalidArgument(format!(
                "score table needs at least 2 methods and 2 settings, got {k} and {n}"
            )));
        }
        for (what, names) in [("method", &self.methods), ("setting", &self.settings)] {
            let unique: BTreeSet<&String> = names.iter().collect();
            if unique.len() != names.len() {
                return Err(Error::InvalidArgument(format!("duplicate {what} name")));
            }
        }
        if self.scores.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: self.scores.len(),
                context: Some("score rows".into()),
            });
        }
        for (row, name) in self.scores.iter().zip(&self.settings) {
            if row.len() != k {
                return Err(Error::DimensionMismatch {
                    expected: k,
                    got: row.len(),
                    context: Some(format!("setting `{name}`")),
                });
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "setting `{name}` has a missing or non-finite score"
                )));
            }
        }
        Ok(())
    }
}

/// Parses a results TSV. The header is either `setting m1 m2 ...` or
/// `metric setting m1 m2 ...`; in the latter form only rows whose first
/// column equals `metric` are kept.
pub fn parse_score_tsv(text: &str, metric: Option<&str>, direction: Direction) -> Result<ScoreTable> {
    parse_score_tsv_skipping(text, metric, direction).map(|(t, _)| t)
}

/// Like [`parse_score_tsv`], also returning the settings dropped because a
/// cell was `NA`.
pub fn parse_score_tsv_skipping(
    text: &str,
    metric: Option<&str>,
    direction: Direction,
) -> Result<(ScoreTable, Vec<String>)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
    let header: Vec<&str> = lines
        .next()
        .ok_or(Error::EmptyInput)?
        .split('\t')
        .collect();
    let has_metric = header.first() == Some(&"metric");
    let skip = if has_metric { 2 } else { 1 };
    if header.len() <= skip {
        return Err(Error::InvalidArgument("results TSV has no method columns".into()));
    }
    let methods: Vec<String> = header[skip..].iter().map(|s| s.to_string()).collect();
    let mut settings = Vec::new();
    let mut scores = Vec::new();
    let mut skipped = Vec::new();
    for line in lines {
        let cells: Vec<&str> = line.split('\t').collect();
        if has_metric {
            if let Some(m) = metric {
                if cells[0] != m {
                    continue;
                }
            }
        }
        if cells.len() != header.len() {
            return Err(Error::DimensionMismatch {
                expected: header.len(),
                got: cells.len(),
                context: Some(format!("results row `{}`", cells[..skip.min(cells.len())].join("/"))),
            });
        }
        if cells[skip..].iter().any(|c| c.trim() == "NA") {
            skipped.push(cells[skip - 1].to_string());
            continue;
        }
        let row = cells[skip..]
            .iter()
            .map(|c| {
                c.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::InvalidArgument(format!("bad score `{c}`")))
            })
            .collect::<Result<Vec<f64>>>()?;
        settings.push(cells[skip - 1].to_string());
        scores.push(row);
    }
    Ok((ScoreTable::new(methods, settings, scores, direction)?, skipped))
}

/// Mid-ranks of `row`, rank 1 for the best value under `direction`.
pub fn mid_ranks(row: &[f64], direction: Direction) -> Vec<f64> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| match direction {
        Direction::Higher => row[b].total_cmp(&row[a]),
        Direction::Lower => row[a].total_cmp(&row[b]),
    });
    let mut ranks = vec![0.0; row.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && row[order[j]] == row[order[i]] {
            j += 1;
        }
        let mid = (i + 1 + j) as f64 / 2.0;
        for &m in &order[i..j] {
            ranks[m] = mid;
        }
        i = j;
    }
    ranks
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankResult {
    pub methods: Vec<String>,
    pub settings: Vec<String>,
    pub direction: Direction,
    pub ranks: Vec<Vec<f64>>,
    pub average_ranks: Vec<f64>,
    pub friedman_statistic: f64,
    pub df: usize,
    pub p_value: f64,
    pub alpha: f64,
    pub critical_value: f64,
    pub significant: bool,
    /// Every setting tied all methods; the statistic is reported as 0.
    pub degenerate: bool,
    pub cd: Option<f64>,
    pub groups: Vec<Vec<String>>,
}

/// Friedman test at level `alpha`, plus the Nemenyi critical difference and
/// the non-significant groups when `alpha` has a q table and k ≤ 20.
pub fn friedman(t: &ScoreTable, alpha: f64) -> Result<RankResult> {
    t.validate()?;
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha must be in (0, 1), got {alpha}")));
    }
    let k = t.methods.len();
    let n = t.settings.len();
    let ranks: Vec<Vec<f64>> = t.scores.iter().map(|r| mid_ranks(r, t.direction)).collect();
    let mut average_ranks = vec![0.0; k];
    for row in &ranks {
        for (a, r) in average_ranks.iter_mut().zip(row) {
            *a += r;
        }
    }
    for a in &mut average_ranks {
        *a /= n as f64;
    }
    let degenerate = t
        .scores
        .iter()
        .all(|row| row.iter().all(|&v| v == row[0]));
    let (kf, nf) = (k as f64, n as f64);
    let statistic = if degenerate {
        0.0
    } else {
        let sum_sq: f64 = average_ranks.iter().map(|r| r * r).sum();
        (12.0 * nf / (kf * (kf + 1.0)) * (sum_sq - kf * (kf + 1.0).powi(2) / 4.0)).max(0.0)
    };
    let df = k - 1;
    let critical_value = chi_square_critical(alpha, df as f64)?;
    let p_value = 1.0 - chi_square_cdf(statistic, df as f64);
    let significant = !degenerate && statistic > critical_value;
    let cd = match nemenyi_cd(k, n, alpha) {
        Ok(cd) => Some(cd),
        Err(Error::UnsupportedK(_)) | Err(Error::InvalidArgument(_)) => None,
        Err(e) => return Err(e),
    };
    let groups = cd
        .map(|cd| nonsignificant_groups(&t.methods, &average_ranks, cd))
        .unwrap_or_default();
    Ok(RankResult {
        methods: t.methods.clone(),
        settings: t.settings.clone(),
        direction: t.direction,
        ranks,
        average_ranks,
        friedman_statistic: statistic,
        df,
        p_value: p_value.clamp(0.0, 1.0),
        alpha,
        critical_value,
        significant,
        degenerate,
        cd,
        groups,
    })
}

/// `q_α(k)` from the embedded table.
pub fn nemenyi_q(k: usize, alpha: f64) -> Result<f64> {
    if !(q_table::K_MIN..=q_table::K_MAX).contains(&k) {
        return Err(Error::UnsupportedK(k));
    }
    let row = if (alpha - 0.05).abs() < 1e-12 {
        &q_table::Q_005
    } else if (alpha - 0.10).abs() < 1e-12 {
        &q_table::Q_010
    } else {
        return Err(Error::InvalidArgument(format!(
            "Nemenyi table covers alpha 0.05 and 0.10, got {alpha}"
        )));
    };
    Ok(row[k - q_table::K_MIN])
}

/// `CD = q_α(k)·√(k(k+1)/(6N))`.
pub fn nemenyi_cd(k: usize, n: usize, alpha: f64) -> Result<f64> {
    let q = nemenyi_q(k, alpha)?;
    if n == 0 {
        return Err(Error::InvalidArgument("N must be positive".into()));
    }
    let kf = k as f64;
    Ok(q * (kf * (kf + 1.0) / (6.0 * n as f64)).sqrt())
}

/// Maximal runs of methods, in rank order, whose average-rank spread is
/// below `cd`. Singleton runs are dropped.
pub fn nonsignificant_groups(methods: &[String], average_ranks: &[f64], cd: f64) -> Vec<Vec<String>> {
    let order = rank_order(average_ranks);
    let mut spans: Vec<(usize, usize)> = Vec::new();
    for i in 0..order.len() {
        let mut j = i;
        while j + 1 < order.len() && average_ranks[order[j + 1]] - average_ranks[order[i]] < cd {
            j += 1;
        }
        if j > i && spans.last().is_none_or(|&(_, e)| j > e) {
            spans.push((i, j));
        }
    }
    spans
        .into_iter()
        .map(|(i, j)| order[i..=j].iter().map(|&m| methods[m].clone()).collect())
        .collect()
}

fn rank_order(average_ranks: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..average_ranks.len()).collect();
    order.sort_by(|&a, &b| average_ranks[a].total_cmp(&average_ranks[b]).then(a.cmp(&b)));
    order
}

fn ln_gamma(x: f64) -> f64 {
    // Lanczos, g = 7, n = 9.
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + 7.5;
    for (i, &c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized lower incomplete gamma `P(a, x)`.
pub fn regularized_gamma_p(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let log_prefix = a * x.ln() - x - ln_gamma(a);
    if x < a + 1.0 {
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut ap = a;
        for _ in 0..10_000 {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * 1e-16 {
                break;
            }
        }
        (sum.ln() + log_prefix).exp().min(1.0)
    } else {
        // Continued fraction for Q(a, x), modified Lentz.
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..10_000 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < 1e-16 {
                break;
            }
        }
        (1.0 - (h.ln() + log_prefix).exp()).max(0.0)
    }
}

pub fn chi_square_cdf(x: f64, df: f64) -> f64 {
    regularized_gamma_p(df / 2.0, x / 2.0)
}

/// Upper-`alpha` critical value of the chi-square distribution.
pub fn chi_square_critical(alpha: f64, df: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) || df <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "chi-square quantile needs alpha in (0,1) and df > 0, got {alpha}, {df}"
        )));
    }
    let target = 1.0 - alpha;
    let (mut lo, mut hi) = (0.0, df.max(1.0));
    while chi_square_cdf(hi, df) < target {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if chi_square_cdf(mid, df) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-13 * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Critical-difference diagram. The better half of the methods is labeled
/// on the left, the rest on the right; bars join non-significant groups.
pub fn cd_diagram(r: &RankResult) -> String {
    let k = r.methods.len();
    let order = rank_order(&r.average_ranks);
    let width = 640.0;
    let (x0, x1) = (160.0, 480.0);
    let axis_y = 60.0;
    let x_of = |rank: f64| {
        if k <= 1 {
            x0
        } else {
            x0 + (rank - 1.0) / (k as f64 - 1.0) * (x1 - x0)
        }
    };
    let left = k.div_ceil(2);
    let label_rows = left.max(k - left);
    let bar_y0 = axis_y + 14.0;
    let bar_step = 8.0;
    let labels_y0 = bar_y0 + bar_step * r.groups.len() as f64 + 16.0;
    let height = labels_y0 + 18.0 * label_rows as f64 + 10.0;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    if let Some(cd) = r.cd {
        let cx1 = x_of(1.0 + cd).min(width - 10.0);
        let _ = writeln!(
            s,
            r#"<line x1="{x0:.2}" y1="20.00" x2="{cx1:.2}" y2="20.00" stroke="black" stroke-width="1.5"/>"#
        );
        for x in [x0, cx1] {
            let _ = writeln!(
                s,
                r#"<line x1="{x:.2}" y1="16.00" x2="{x:.2}" y2="24.00" stroke="black"/>"#
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="13.00" text-anchor="middle">CD = {cd:.3}</text>"#,
            0.5 * (x0 + cx1)
        );
    }
    let _ = writeln!(
        s,
        r#"<line x1="{x0:.2}" y1="{axis_y:.2}" x2="{x1:.2}" y2="{axis_y:.2}" stroke="black" stroke-width="1.5"/>"#
    );
    for i in 1..=k {
        let x = x_of(i as f64);
        let _ = writeln!(
            s,
            r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{axis_y:.2}" stroke="black"/>"#,
            axis_y - 6.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{i}</text>"#,
            axis_y - 10.0
        );
    }
    for (gi, group) in r.groups.iter().enumerate() {
        let ranks: Vec<f64> = group
            .iter()
            .filter_map(|name| r.methods.iter().position(|m| m == name))
            .map(|m| r.average_ranks[m])
            .collect();
        let lo = ranks.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = ranks.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let y = bar_y0 + bar_step * gi as f64;
        let _ = writeln!(
            s,
            r#"<line class="group" x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="black" stroke-width="3"/>"#,
            x_of(lo) - 3.0,
            x_of(hi) + 3.0
        );
    }
    for (pos, &m) in order.iter().enumerate() {
        let rank = r.average_ranks[m];
        let x = x_of(rank);
        let (row, lx, anchor) = if pos < left {
            (pos, x0 - 20.0, "end")
        } else {
            (k - 1 - pos, x1 + 20.0, "start")
        };
        let y = labels_y0 + 18.0 * row as f64;
        let _ = writeln!(
            s,
            r#"<polyline class="method" points="{x:.2},{axis_y:.2} {x:.2},{y:.2} {:.2},{y:.2}" fill="none" stroke="black"/>"#,
            if anchor == "end" { lx + 4.0 } else { lx - 4.0 }
        );
        let _ = writeln!(
            s,
            r#"<text x="{lx:.2}" y="{:.2}" text-anchor="{anchor}">{} ({rank:.2})</text>"#,
            y + 4.0,
            escape(&r.methods[m])
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    fn abc_table() -> ScoreTable {
        ScoreTable::new(
            names(&["A", "B", "C"]),
            names(&["s1", "s2", "s3", "s4"]),
            vec![
                vec![0.9, 0.8, 0.7],
                vec![0.95, 0.7, 0.6],
                vec![0.8, 0.75, 0.5],
                vec![0.85, 0.84, 0.83],
            ],
            Direction::Higher,
        )
        .unwrap()
    }

    #[test]
    fn friedman_fixture() {
        let r = friedman(&abc_table(), 0.05).unwrap();
        assert_eq!(r.average_ranks, vec![1.0, 2.0, 3.0]);
        assert!((r.friedman_statistic - 8.0).abs() < 1e-12);
        assert!((r.critical_value - 5.991_464_547_107_979).abs() < 1e-8);
        assert!(r.significant);
        let cd = r.cd.unwrap();
        assert!((cd - 2.343 * 0.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(r.groups, vec![names(&["A", "B"]), names(&["B", "C"])]);
    }

    #[test]
    fn fully_tied_table() {
        let t = ScoreTable::new(
            names(&["A", "B"]),
            names(&["s1", "s2"]),
            vec![vec![0.5, 0.5], vec![0.7, 0.7]],
            Direction::Higher,
        )
        .unwrap();
        let r = friedman(&t, 0.05).unwrap();
        assert_eq!(r.friedman_statistic, 0.0);
        assert!(!r.significant);
        assert!(r.degenerate);
    }

    #[test]
    fn direction_reverses_ranks() {
        let mut t = abc_table();
        let hi = friedman(&t, 0.05).unwrap();
        t.direction = Direction::Lower;
        let lo = friedman(&t, 0.05).unwrap();
        for (a, b) in hi.ranks.iter().zip(&lo.ranks) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x + y, 4.0);
            }
        }
    }

    #[test]
    fn mid_ranks_share_ties() {
        assert_eq!(mid_ranks(&[3.0, 1.0, 3.0, 2.0], Direction::Higher), vec![1.5, 4.0, 1.5, 3.0]);
    }

    #[test]
    fn cd_examples() {
        assert!((nemenyi_cd(2, 9, 0.05).unwrap() - 1.960 / 3.0).abs() < 1e-12);
        assert!((nemenyi_cd(3, 4, 0.05).unwrap() - 1.657).abs() < 1e-3);
        assert!(nemenyi_cd(5, 1_000_000, 0.05).unwrap() < 0.01);
        assert!(matches!(nemenyi_cd(21, 5, 0.05), Err(Error::UnsupportedK(21))));
        assert!(matches!(nemenyi_cd(1, 5, 0.05), Err(Error::UnsupportedK(1))));
    }

    #[test]
    fn diagram_bars() {
        let mut r = friedman(&abc_table(), 0.05).unwrap();
        let svg = cd_diagram(&r);
        assert_eq!(svg.matches(r#"class="group""#).count(), 2);
        assert_eq!(svg.matches(r#"class="method""#).count(), 3);
        r.methods.truncate(2);
        r.average_ranks = vec![1.0, 1.5];
        r.groups = nonsignificant_groups(&r.methods, &r.average_ranks, 1.0);
        assert_eq!(cd_diagram(&r).matches(r#"class="group""#).count(), 1);
        r.average_ranks = vec![1.0, 2.5];
        r.groups = nonsignificant_groups(&r.methods, &r.average_ranks, 1.0);
        assert_eq!(cd_diagram(&r).matches(r#"class="group""#).count(), 0);
    }

    #[test]
    fn parses_both_tsv_shapes() {
        let plain = "setting\tA\tB\ns1\t0.9\t0.8\ns2\t0.7\t0.6\n";
        let t = parse_score_tsv(plain, None, Direction::Higher).unwrap();
        assert_eq!(t.methods, names(&["A", "B"]));
        let long = "metric\tsetting\tA\tB\nes_auc\ts1\t0.9\t0.8\nmin_auc\ts1\t0.1\t0.2\nes_auc\ts2\t0.7\t0.6\n";
        let t = parse_score_tsv(long, Some("es_auc"), Direction::Higher).unwrap();
        assert_eq!(t.settings, names(&["s1", "s2"]));
        assert_eq!(t.scores[1], vec![0.7, 0.6]);
    }
}
