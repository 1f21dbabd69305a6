//! Static description of a configured run: layers, subspaces, parameter
//! and optimizer-memory accounting.

use serde::Serialize;

use crate::adapters::{trainable_param_count, AdapterSet, ParamCount, ParamStage};
use crate::error::Result;
use crate::harness::config::RunConfig;
use crate::harness::train::{memory_report, MemoryReport};
use crate::model::ToyDepthModel;
use crate::registry::{classify_layers, LayerDescriptor};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunInfo {
    pub layers: Vec<LayerDescriptor>,
    pub subspace_counts: SubspaceCounts,
    pub model_params: usize,
    pub stage1: ParamCount,
    pub stage2: ParamCount,
    pub memory: MemoryReport,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SubspaceCounts {
    pub conv: usize,
    pub mlp: usize,
    pub attention: usize,
}

pub fn cmd_info(cfg: &RunConfig) -> Result<RunInfo> {
    cfg.validate()?;
    let model = ToyDepthModel::<f32>::build(&cfg.model_config())?;
    let registry = classify_layers(&model)?;
    let selection = registry.select_subspaces(&cfg.stage1.subspaces)?;
    let adapters = AdapterSet::<f32>::attach(&selection, cfg.stage1.rank, cfg.seed)?;
    let none = AdapterSet::<f32>::from_parts(registry.clone(), Vec::new())?;
    let (conv, mlp, attention) = registry.counts();
    Ok(RunInfo {
        layers: registry.layers().into_iter().cloned().collect(),
        subspace_counts: SubspaceCounts { conv, mlp, attention },
        model_params: model.param_count(),
        stage1: trainable_param_count(&adapters, &registry, ParamStage::One),
        stage2: trainable_param_count(
            &none,
            &registry,
            ParamStage::Two {
                projection_rank: cfg.stage2.rank,
            },
        ),
        memory: memory_report(&registry, cfg.stage2.rank)?,
    })
}
