//! Signal-to-noise ratio `|mu| / sigma` of variational posteriors.

use std::fmt::Write as _;

use crate::model::LanguageModel;

#[derive(Debug, Clone, PartialEq)]
pub struct SnrRow {
    /// Posterior name, e.g. `bayes/l1.wc` or `gp/l1.ci/theta`.
    pub name: String,
    pub values: Vec<f64>,
    pub median: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnrReport {
    pub rows: Vec<SnrRow>,
    /// Median over every element of every row.
    pub overall_median: f64,
}

/// Median of the values (mean of the middle pair for even counts); NaN
/// for an empty slice.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// SNR of every weight posterior (Bayesian weights and GP weight
/// matrices). Basis coefficients are not weights and are left out.
pub fn snr_report(model: &LanguageModel) -> SnrReport {
    let mut rows = Vec::new();
    for (w, gv) in &model.bayes {
        let values = gv.snr();
        rows.push(SnrRow {
            name: format!("bayes/{w}"),
            median: median(&values),
            values,
        });
    }
    for (site, gp) in &model.gp {
        if let Some(theta) = &gp.theta {
            let values = theta.snr();
            rows.push(SnrRow {
                name: format!("gp/{site}/theta"),
                median: median(&values),
                values,
            });
        }
    }
    let all: Vec<f64> = rows.iter().flat_map(|r| r.values.iter().copied()).collect();
    SnrReport {
        overall_median: median(&all),
        rows,
    }
}

impl SnrReport {
    /// Tab-separated `position, elements, median` rows plus an `all` row.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("position\telements\tmedian_snr\n");
        for r in &self.rows {
            let _ = writeln!(out, "{}\t{}\t{}", r.name, r.values.len(), r.median);
        }
        let total: usize = self.rows.iter().map(|r| r.values.len()).sum();
        let _ = writeln!(out, "all\t{total}\t{}", self.overall_median);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
        assert!(median(&[]).is_nan());
    }
}
