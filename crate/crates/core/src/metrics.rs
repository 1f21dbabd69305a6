//! Depth evaluation: Abs Rel, Sq Rel, RMSE, RMSE log and threshold accuracy,
//! with optional median scaling and a depth-range cap.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta: f64,
}

impl DepthMetrics {
    pub const FIELDS: [&'static str; 5] = ["abs_rel", "sq_rel", "rmse", "rmse_log", "delta"];

    pub fn to_array(&self) -> [f64; 5] {
        [self.abs_rel, self.sq_rel, self.rmse, self.rmse_log, self.delta]
    }

    pub fn from_array(v: [f64; 5]) -> Self {
        Self {
            abs_rel: v[0],
            sq_rel: v[1],
            rmse: v[2],
            rmse_log: v[3],
            delta: v[4],
        }
    }

    /// Every field rounded to five decimals, the report precision.
    pub fn rounded(&self) -> Self {
        Self::from_array(self.to_array().map(|v| (v * 1e5).round() / 1e5))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scaling {
    Median,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub min_depth: f64,
    pub max_depth: f64,
    pub delta_threshold: f64,
    pub scaling: Scaling,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            min_depth: 0.1,
            max_depth: 150.0,
            delta_threshold: 1.25,
            scaling: Scaling::Median,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_depth > 0.0 && self.min_depth < self.max_depth) {
            return Err(Error::Config(format!(
                "eval.min_depth {} must be positive and below eval.max_depth {}",
                self.min_depth, self.max_depth
            )));
        }
        if !(self.delta_threshold > 1.0) {
            return Err(Error::Config(format!(
                "eval.delta_threshold {} must exceed 1",
                self.delta_threshold
            )));
        }
        Ok(())
    }
}

/// Median of a non-empty slice; an even count averages the two central values.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

/// Rescales `pred` by `median(gt[mask]) / median(pred[mask])`.
///
/// Each value is divided by the prediction median before multiplying by the
/// ground-truth median, so a prediction multiplied by an exactly
/// representable factor yields bit-identical output.
pub fn median_scale(pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    if pred.len() != gt.len() || pred.len() != mask.len() {
        return Err(Error::dim("median_scale", &[pred.len()], &[gt.len(), mask.len()]));
    }
    let pm: Vec<f64> = pred.iter().zip(mask).filter(|(_, &m)| m).map(|(&p, _)| p).collect();
    let gm: Vec<f64> = gt.iter().zip(mask).filter(|(_, &m)| m).map(|(&g, _)| g).collect();
    if pm.iter().any(|&p| !(p > 0.0)) {
        return Err(Error::Evaluation("non-positive predicted depth under the mask".into()));
    }
    let (Some(mp), Some(mg)) = (median(&pm), median(&gm)) else {
        return Err(Error::Evaluation("median scaling over an empty mask".into()));
    };
    if mp == 0.0 {
        return Err(Error::Evaluation("median of prediction is zero".into()));
    }
    Ok(pred.iter().map(|&p| (p / mp) * mg).collect())
}

/// Metrics over pixels whose ground truth lies in `[min_depth, max_depth]`,
/// after optional median scaling and clamping the prediction to that range.
pub fn compute_metrics(pred: &[f64], gt: &[f64], cfg: &EvalConfig) -> Result<DepthMetrics> {
    if pred.len() != gt.len() {
        return Err(Error::dim("compute_metrics", &[pred.len()], &[gt.len()]));
    }
    let mask: Vec<bool> = gt
        .iter()
        .map(|&g| g >= cfg.min_depth && g <= cfg.max_depth)
        .collect();
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::Evaluation("no ground-truth pixels inside the depth range".into()));
    }
    let scaled;
    let pred = match cfg.scaling {
        Scaling::Median => {
            scaled = median_scale(pred, gt, &mask)?;
            &scaled[..]
        }
        Scaling::None => pred,
    };
    let (mut abs_rel, mut sq_rel, mut sq, mut sq_log, mut within) = (0.0, 0.0, 0.0, 0.0, 0usize);
    for ((&p, &g), _) in pred.iter().zip(gt).zip(&mask).filter(|(_, &m)| m) {
        if !p.is_finite() {
            return Err(Error::Evaluation("non-finite predicted depth".into()));
        }
        let p = p.clamp(cfg.min_depth, cfg.max_depth);
        let diff = p - g;
        abs_rel += diff.abs() / g;
        sq_rel += diff * diff / g;
        sq += diff * diff;
        let dl = p.ln() - g.ln();
        sq_log += dl * dl;
        if (p / g).max(g / p) < cfg.delta_threshold {
            within += 1;
        }
    }
    let n = count as f64;
    Ok(DepthMetrics {
        abs_rel: abs_rel / n,
        sq_rel: sq_rel / n,
        rmse: (sq / n).sqrt(),
        rmse_log: (sq_log / n).sqrt(),
        delta: within as f64 / n,
    })
}

/// Unweighted mean of each field across frames.
pub fn aggregate(frames: &[DepthMetrics]) -> Result<DepthMetrics> {
    if frames.is_empty() {
        return Err(Error::Evaluation("cannot aggregate zero frames".into()));
    }
    let n = frames.len() as f64;
    let mut sum = [0.0; 5];
    for f in frames {
        for (s, v) in sum.iter_mut().zip(f.to_array()) {
            *s += v;
        }
    }
    Ok(DepthMetrics::from_array(sum.map(|s| s / n)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uncapped() -> EvalConfig {
        EvalConfig {
            min_depth: 1e-3,
            max_depth: 1e3,
            scaling: Scaling::None,
            ..EvalConfig::default()
        }
    }

    #[test]
    fn median_scale_examples() {
        let all = [true; 3];
        assert_eq!(median_scale(&[1.0, 2.0, 4.0], &[3.0, 6.0, 9.0], &all).unwrap(), vec![3.0, 6.0, 12.0]);
        let gt = [2.0, 5.0, 7.0];
        assert_eq!(median_scale(&gt, &gt, &all).unwrap(), gt.to_vec());
        let pred: Vec<f64> = gt.iter().map(|g| 3.0 * g).collect();
        assert_eq!(median_scale(&pred, &gt, &all).unwrap(), gt.to_vec());
    }

    #[test]
    fn median_scale_errors() {
        assert!(matches!(
            median_scale(&[1.0], &[1.0], &[false]),
            Err(Error::Evaluation(_))
        ));
        assert!(median_scale(&[0.0, 0.0, 1.0], &[1.0, 1.0, 1.0], &[true; 3]).is_err());
    }

    #[test]
    fn even_median_averages_centre() {
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn identical_maps_are_perfect() {
        let gt = [0.5, 1.5, 3.0, 9.0];
        let m = compute_metrics(&gt, &gt, &EvalConfig::default()).unwrap();
        assert_eq!(m, DepthMetrics { delta: 1.0, ..DepthMetrics::default() });
    }

    #[test]
    fn hand_case() {
        let m = compute_metrics(&[1.0, 2.0], &[2.0, 2.0], &uncapped()).unwrap();
        assert!((m.abs_rel - 0.25).abs() < 1e-12);
        assert!((m.sq_rel - 0.25).abs() < 1e-12);
        assert!((m.rmse - 0.5f64.sqrt()).abs() < 1e-12);
        assert!((m.rmse_log - 2f64.ln() / 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(m.delta, 0.5);
    }

    #[test]
    fn median_scaling_removes_global_factor() {
        let gt = [1.0, 2.0, 4.0, 8.0, 3.0];
        let pred: Vec<f64> = gt.iter().map(|g| g * 3.0).collect();
        let m = compute_metrics(&pred, &gt, &EvalConfig::default()).unwrap();
        assert_eq!(m, DepthMetrics { delta: 1.0, ..DepthMetrics::default() });
    }

    #[test]
    fn out_of_range_ground_truth_is_masked() {
        let cfg = EvalConfig { scaling: Scaling::None, ..EvalConfig::default() };
        let m = compute_metrics(&[1.0, 50.0], &[1.0, 500.0], &cfg).unwrap();
        assert_eq!(m.abs_rel, 0.0);
        assert!(matches!(
            compute_metrics(&[1.0], &[500.0], &cfg),
            Err(Error::Evaluation(_))
        ));
    }

    #[test]
    fn predictions_are_clamped_to_range() {
        let cfg = EvalConfig { scaling: Scaling::None, ..EvalConfig::default() };
        let m = compute_metrics(&[1000.0], &[150.0], &cfg).unwrap();
        assert_eq!(m.abs_rel, 0.0);
    }

    #[test]
    fn aggregate_examples() {
        let a = DepthMetrics { abs_rel: 0.2, ..DepthMetrics::default() };
        let b = DepthMetrics { abs_rel: 0.4, ..DepthMetrics::default() };
        assert_eq!(aggregate(&[a]).unwrap(), a);
        assert!((aggregate(&[a, b]).unwrap().abs_rel - 0.3).abs() < 1e-15);
        assert_eq!(aggregate(&[a, b]).unwrap(), aggregate(&[b, a]).unwrap());
        assert!(aggregate(&[]).is_err());
    }
}
