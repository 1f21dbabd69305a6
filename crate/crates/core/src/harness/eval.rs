//! Evaluation of a predictor over a dataset.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::harness::checkpoint::Checkpoint;
use crate::harness::dataset::{DepthDataset, Frame};
use crate::harness::train::TrainState;
use crate::metrics::{aggregate, compute_metrics, DepthMetrics, EvalConfig};
use crate::model::{DepthMap, ToyDepthModel};
use crate::tensor::Tensor;

/// Source of predicted depth maps.
#[derive(Clone, Debug)]
pub enum Predictor {
    /// A model with all adaptation folded into its weights.
    Model(Box<ToyDepthModel<f32>>),
    /// Returns the ground truth; checks the evaluation path itself.
    Identity,
}

impl Predictor {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Ok(Self::Model(Box::new(TrainState::from_checkpoint(ckpt)?.effective_model()?)))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Depth maps for `frames`, run in chunks of `batch`.
    pub fn predict(&self, frames: &[Frame], batch: usize) -> Result<Vec<DepthMap>> {
        match self {
            Predictor::Identity => Ok(frames
                .iter()
                .map(|f| DepthMap {
                    height: f.depth.shape()[0],
                    width: f.depth.shape()[1],
                    values: f.depth.to_f64_vec(),
                })
                .collect()),
            Predictor::Model(model) => {
                let mut out = Vec::with_capacity(frames.len());
                for chunk in frames.chunks(batch.max(1)) {
                    let (rgb, _) = stack(chunk)?;
                    out.extend(model.forward_depth(&rgb)?);
                }
                Ok(out)
            }
        }
    }
}

/// Stacks frames into `rgb[B×3×H×W]` and `depth[B×H×W]`.
pub fn stack<'a>(frames: impl IntoIterator<Item = &'a Frame>) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let mut rgb = Vec::new();
    let mut depth = Vec::new();
    let mut shape: Option<Vec<usize>> = None;
    let mut n = 0;
    for f in frames {
        match &shape {
            Some(s) if s != f.depth.shape() => {
                return Err(Error::dim("stack", s, f.depth.shape()));
            }
            Some(_) => {}
            None => shape = Some(f.depth.shape().to_vec()),
        }
        rgb.extend_from_slice(f.rgb.data());
        depth.extend_from_slice(f.depth.data());
        n += 1;
    }
    let Some(s) = shape else {
        return Err(Error::Evaluation("empty batch".into()));
    };
    Ok((
        Tensor::new([n, 3, s[0], s[1]], rgb)?,
        Tensor::new([n, s[0], s[1]], depth)?,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrameMetrics {
    pub frame: String,
    #[serde(flatten)]
    pub metrics: DepthMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub frames: Vec<FrameMetrics>,
    pub aggregate: DepthMetrics,
}

impl Evaluation {
    /// One row per frame: `frame,abs_rel,sq_rel,rmse,rmse_log,delta`.
    pub fn write_per_frame_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        let mut header = vec!["frame"];
        header.extend(DepthMetrics::FIELDS);
        w.write_record(&header).map_err(|e| csv_error(path, e))?;
        for f in &self.frames {
            let mut row = vec![f.frame.clone()];
            row.extend(f.metrics.to_array().iter().map(|v| v.to_string()));
            w.write_record(&row).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path, format!("{other:?}")),
    }
}

/// Per-frame metrics and their unweighted mean. Predictions are multiplied
/// by `pred_scale` before scoring.
pub fn evaluate(
    predictor: &Predictor,
    frames: &[Frame],
    cfg: &EvalConfig,
    pred_scale: f64,
    batch: usize,
) -> Result<Evaluation> {
    if frames.is_empty() {
        return Err(Error::Evaluation("dataset is empty".into()));
    }
    if !(pred_scale > 0.0 && pred_scale.is_finite()) {
        return Err(Error::Config(format!("prediction scale {pred_scale} must be positive")));
    }
    cfg.validate()?;
    let preds = predictor.predict(frames, batch)?;
    let mut per = Vec::with_capacity(frames.len());
    for (f, p) in frames.iter().zip(&preds) {
        let pred: Vec<f64> = p.values.iter().map(|v| v * pred_scale).collect();
        let metrics = compute_metrics(&pred, &f.depth.to_f64_vec(), cfg)
            .map_err(|e| Error::Evaluation(format!("frame {}: {e}", f.name)))?;
        per.push(FrameMetrics {
            frame: f.name.clone(),
            metrics,
        });
    }
    let agg = aggregate(&per.iter().map(|f| f.metrics).collect::<Vec<_>>())?;
    Ok(Evaluation {
        frames: per,
        aggregate: agg,
    })
}

/// Loads a dataset fully and evaluates it.
pub fn cmd_eval(
    predictor: &Predictor,
    dataset: &dyn DepthDataset,
    cfg: &EvalConfig,
    pred_scale: f64,
    per_frame_csv: Option<&Path>,
) -> Result<Evaluation> {
    if dataset.is_empty() {
        return Err(Error::Evaluation("dataset is empty".into()));
    }
    let frames = dataset.frames()?;
    let ev = evaluate(predictor, &frames, cfg, pred_scale, 16)?;
    if let Some(p) = per_frame_csv {
        ev.write_per_frame_csv(p)?;
    }
    Ok(ev)
}
