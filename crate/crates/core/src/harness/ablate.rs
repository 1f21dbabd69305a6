//! Stage-1 runs over nested subspace selections.

use std::collections::BTreeSet;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::eval::{evaluate, Predictor};
use crate::harness::train::{train_with_data, write_json, RunData, Stage};
use crate::metrics::DepthMetrics;
use crate::registry::SubspaceKind;

/// `{Mlp} ⊂ {Mlp, Conv} ⊂ {Mlp, Conv, Attention}`.
pub fn ablation_rows() -> [(&'static str, BTreeSet<SubspaceKind>); 3] {
    use SubspaceKind::*;
    [
        ("MLP", [Mlp].into()),
        ("MLP+Conv", [Mlp, Conv].into()),
        ("MLP+Conv+Attn", [Mlp, Conv, Attention].into()),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub subspaces: Vec<SubspaceKind>,
    pub trainable_params: usize,
    pub metrics: DepthMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationTable {
    pub steps: usize,
    pub seed: u64,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_text(&self) -> String {
        let mut out = format!("{:<15} {:>9}", "subspaces", "params");
        for f in DepthMetrics::FIELDS {
            out.push_str(&format!(" {f:>9}"));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{:<15} {:>9}", r.name, r.trainable_params));
            for v in r.metrics.to_array() {
                out.push_str(&format!(" {v:>9.3}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| crate::harness::eval::csv_error(path, e))?;
        let mut header = vec!["subspaces", "trainable_params"];
        header.extend(DepthMetrics::FIELDS);
        w.write_record(&header).map_err(|e| crate::harness::eval::csv_error(path, e))?;
        for r in &self.rows {
            let mut row = vec![r.name.clone(), r.trainable_params.to_string()];
            row.extend(r.metrics.to_array().iter().map(|v| v.to_string()));
            w.write_record(&row).map_err(|e| crate::harness::eval::csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Runs stage 1 once per row with the same seed and scores each result on
/// the test split. Row outputs go to `<out_dir>/ablation/<row>/`.
pub fn ablate_with_data(cfg: &RunConfig, data: &RunData) -> Result<AblationTable> {
    cfg.validate()?;
    let mut rows = Vec::with_capacity(3);
    for (name, subspaces) in ablation_rows() {
        let mut row_cfg = cfg.clone();
        row_cfg.stage1.subspaces = subspaces.clone();
        row_cfg.out_dir = cfg.out_dir.join("ablation").join(name.to_lowercase().replace('+', "_"));
        let outcome = train_with_data(&row_cfg, Stage::One, None, data)?;
        let model = outcome.state.effective_model()?;
        let test = evaluate(&Predictor::Model(Box::new(model)), &data.test, &cfg.eval, 1.0, cfg.eval_batch)?;
        rows.push(AblationRow {
            name: name.to_string(),
            subspaces: subspaces.into_iter().collect(),
            trainable_params: outcome.report.param_count.adapter_params,
            metrics: test.aggregate,
        });
    }
    let table = AblationTable {
        steps: cfg.stage1.steps,
        seed: cfg.seed,
        rows,
    };
    let dir = cfg.out_dir.join("ablation");
    write_json(&dir.join("ablation.json"), &table)?;
    table.write_csv(&dir.join("ablation.csv"))?;
    Ok(table)
}

/// `ablate`: generates the synthetic split and runs the three rows.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<AblationTable> {
    cfg.validate()?;
    ablate_with_data(cfg, &RunData::synthetic(cfg)?)
}
