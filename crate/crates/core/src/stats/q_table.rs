//! Critical values for the Nemenyi test.
//!
//! Each entry is the upper-α quantile of the studentized range for `k`
//! means with infinite degrees of freedom, divided by √2. Index 0 is k = 2.
//! The α = 0.05 row and the α = 0.10 row for k ≤ 10 are the values printed
//! in the standard tables used with Friedman rank comparisons. The α = 0.10
//! row for k = 11..20 was computed from the same distribution and rounded to
//! three decimals. `tests/stats_oracle.rs` re-derives every entry by quadrature.

pub const K_MIN: usize = 2;
pub const K_MAX: usize = 20;

pub const Q_005: [f64; 19] = [
    1.960, 2.343, 2.569, 2.728, 2.850, 2.949, 3.031, 3.102, 3.164, 3.219, 3.268, 3.313, 3.354,
    3.391, 3.426, 3.458, 3.489, 3.517, 3.544,
];

pub const Q_010: [f64; 19] = [
    1.645, 2.052, 2.291, 2.459, 2.589, 2.693, 2.780, 2.855, 2.920, 2.978, 3.030, 3.077, 3.120,
    3.159, 3.196, 3.230, 3.261, 3.291, 3.319,
];
