//! Relative change between two metric rows.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::DepthMetrics;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricDelta {
    pub metric: String,
    pub baseline: f64,
    pub candidate: f64,
    /// `(candidate − baseline) / baseline · 100`, unrounded.
    pub change_percent: f64,
    /// `change_percent` rounded half to even at one decimal.
    pub change_percent_rounded: f64,
    /// Whether the change is an improvement: a drop for error metrics, a
    /// rise for δ.
    pub improved: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelativeReport {
    pub rows: Vec<MetricDelta>,
}

/// Half-to-even rounding at one decimal.
pub fn round_tenth(x: f64) -> f64 {
    let r = (x * 10.0).round_ties_even() / 10.0;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

/// Signed relative changes of every field. Fails on a zero baseline field.
pub fn cmd_report(baseline: &DepthMetrics, candidate: &DepthMetrics) -> Result<RelativeReport> {
    let b = baseline.to_array();
    let c = candidate.to_array();
    let mut rows = Vec::with_capacity(5);
    for (i, name) in DepthMetrics::FIELDS.iter().enumerate() {
        if b[i] == 0.0 || !b[i].is_finite() || !c[i].is_finite() {
            return Err(Error::Report(format!(
                "baseline {name} is {}; relative change undefined",
                b[i]
            )));
        }
        let change = (c[i] - b[i]) / b[i] * 100.0;
        let higher_is_better = *name == "delta";
        rows.push(MetricDelta {
            metric: name.to_string(),
            baseline: b[i],
            candidate: c[i],
            change_percent: change,
            change_percent_rounded: round_tenth(change),
            improved: if higher_is_better { c[i] > b[i] } else { c[i] < b[i] },
        });
    }
    Ok(RelativeReport { rows })
}

impl RelativeReport {
    pub fn get(&self, metric: &str) -> Option<&MetricDelta> {
        self.rows.iter().find(|r| r.metric == metric)
    }

    /// Metric values at three decimals, changes signed at one decimal.
    pub fn to_text(&self) -> String {
        let mut out = format!("{:<10} {:>10} {:>10} {:>8}\n", "metric", "baseline", "candidate", "change");
        for r in &self.rows {
            out.push_str(&format!(
                "{:<10} {:>10.3} {:>10.3} {:>+7.1}%\n",
                r.metric, r.baseline, r.candidate, r.change_percent_rounded
            ));
        }
        out
    }
}

/// Parses `"a,b,c,d,e"` (five comma-separated numbers in field order).
pub fn parse_metric_row(text: &str) -> Result<DepthMetrics> {
    let vals: Vec<f64> = text
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Config(format!("metric row `{text}`: {e}")))?;
    let arr: [f64; 5] = vals.try_into().map_err(|v: Vec<f64>| {
        Error::Config(format!("metric row `{text}` has {} values, expected 5", v.len()))
    })?;
    Ok(DepthMetrics::from_array(arr))
}
