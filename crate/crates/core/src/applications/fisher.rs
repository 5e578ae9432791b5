//! Fisher's exact test for 2×2 tables.

use statrs::function::factorial::{binomial, ln_factorial};

use crate::assignment::Label;
use crate::engine::{Orientation, Statistic};
use crate::error::{CrtError, Result};

/// Counts `n_zy` of units with treatment `z` and binary outcome `y`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct TwoByTwoTable {
    pub n00: u64,
    pub n01: u64,
    pub n10: u64,
    pub n11: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Side {
    /// Large `n11` is extreme (positive association).
    #[default]
    Greater,
    Less,
    /// Sum of point probabilities not exceeding the observed one.
    TwoSided,
}

// Relative slack when comparing point probabilities for the two-sided test,
// so that tables with mathematically equal probability are counted.
const TWO_SIDED_SLACK: f64 = 1e-7;

impl TwoByTwoTable {
    pub fn new(n00: u64, n01: u64, n10: u64, n11: u64) -> Self {
        TwoByTwoTable { n00, n01, n10, n11 }
    }

    /// Tabulates binary treatments against binary outcomes.
    pub fn from_data(z: &[Label], y: &[f64]) -> Result<Self> {
        if z.len() != y.len() {
            return Err(CrtError::Data(format!(
                "{} treatments for {} outcomes",
                z.len(),
                y.len()
            )));
        }
        let mut t = TwoByTwoTable::default();
        for (i, (&zi, &yi)) in z.iter().zip(y).enumerate() {
            let cell = match (zi, yi) {
                (0, 0.0) => &mut t.n00,
                (0, 1.0) => &mut t.n01,
                (1, 0.0) => &mut t.n10,
                (1, 1.0) => &mut t.n11,
                _ => {
                    return Err(CrtError::Data(format!(
                        "unit {i}: treatment {zi} and outcome {yi} must both be binary"
                    )))
                }
            };
            *cell += 1;
        }
        Ok(t)
    }

    pub fn n(&self) -> u64 {
        self.n00 + self.n01 + self.n10 + self.n11
    }

    /// Row margin `N_{z·}`.
    pub fn row(&self, z: u8) -> u64 {
        if z == 0 {
            self.n00 + self.n01
        } else {
            self.n10 + self.n11
        }
    }

    /// Column margin `N_{·y}`.
    pub fn col(&self, y: u8) -> u64 {
        if y == 0 {
            self.n00 + self.n10
        } else {
            self.n01 + self.n11
        }
    }

    /// The table with the same margins and `n11` in the treated-success cell,
    /// if one exists.
    pub fn with_n11(&self, n11: u64) -> Option<TwoByTwoTable> {
        let (r1, c1, n) = (self.row(1), self.col(1), self.n());
        let n10 = r1.checked_sub(n11)?;
        let n01 = c1.checked_sub(n11)?;
        let n00 = (n + n11).checked_sub(r1 + c1)?;
        Some(TwoByTwoTable { n00, n01, n10, n11 })
    }

    /// Range of `n11` over tables with these margins.
    pub fn n11_range(&self) -> (u64, u64) {
        let (r1, c1, n) = (self.row(1), self.col(1), self.n());
        ((r1 + c1).saturating_sub(n), r1.min(c1))
    }

    /// Hypergeometric probability of this table given its margins:
    /// `N_{0·}! N_{1·}! N_{·0}! N_{·1}! / (n00! n01! n10! n11! N!)`.
    pub fn point_probability(&self) -> f64 {
        let lf = |k: u64| ln_factorial(k);
        (lf(self.row(0)) + lf(self.row(1)) + lf(self.col(0)) + lf(self.col(1))
            - lf(self.n00)
            - lf(self.n01)
            - lf(self.n10)
            - lf(self.n11)
            - lf(self.n()))
        .exp()
    }

    /// `C(N_{1·}, n11) C(N_{0·}, n01) / C(N, N_{·1})`: which treated units succeed.
    pub fn point_probability_by_rows(&self) -> f64 {
        binomial(self.row(1), self.n11) * binomial(self.row(0), self.n01) / binomial(self.n(), self.col(1))
    }

    /// `C(N_{·1}, n11) C(N_{·0}, n10) / C(N, N_{1·})`: which successes are treated.
    pub fn point_probability_by_cols(&self) -> f64 {
        binomial(self.col(1), self.n11) * binomial(self.col(0), self.n10) / binomial(self.n(), self.row(1))
    }
}

/// Fisher's exact p-value, a tail sum over tables with the observed margins.
pub fn fisher_exact(table: &TwoByTwoTable, side: Side) -> f64 {
    let (lo, hi) = table.n11_range();
    let prob = |k: u64| {
        table
            .with_n11(k)
            .expect("n11 within range")
            .point_probability_by_rows()
    };
    let p = match side {
        Side::Greater => (table.n11..=hi).map(prob).sum(),
        Side::Less => (lo..=table.n11).map(prob).sum(),
        Side::TwoSided => {
            let observed = prob(table.n11);
            (lo..=hi)
                .map(prob)
                .filter(|&q| q <= observed * (1.0 + TWO_SIDED_SLACK))
                .sum()
        }
    };
    f64::min(p, 1.0)
}

/// Number of treated successes, `n11`, as a large-is-extreme statistic.
pub fn n11_statistic() -> Statistic {
    Statistic::new("n11", Orientation::LargeIsExtreme, |inp| {
        let mut count = 0.0;
        for (i, y) in inp.outcomes.iter_defined() {
            if inp.assignment[i] == 1 && y == 1.0 {
                count += 1.0;
            }
        }
        Ok(count)
    })
}

/// Unit-level data laid out from a table: `n00` rows of (0, 0), then (0, 1),
/// (1, 0) and (1, 1).
pub fn table_to_units(table: &TwoByTwoTable) -> (Vec<Label>, Vec<f64>) {
    let mut z = Vec::new();
    let mut y = Vec::new();
    for (zi, yi, count) in [
        (0, 0.0, table.n00),
        (0, 1.0, table.n01),
        (1, 0.0, table.n10),
        (1, 1.0, table.n11),
    ] {
        for _ in 0..count {
            z.push(zi);
            y.push(yi);
        }
    }
    (z, y)
}
