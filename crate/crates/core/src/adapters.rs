//! Stage-1 low-rank adapters: the effective weight of an adapted layer is
//! `W + B·A` with `W` frozen, `B ∈ R^{m×r}` and `A ∈ R^{r×n}`.
//!
//! `B` starts at zero and `A` is drawn from `N(0, 0.02²)`, so attaching never
//! changes the model output. No rank-dependent scale is applied to `B·A`.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::model::ToyDepthModel;
use crate::registry::{LayerDescriptor, SubspaceRegistry};
use crate::tensor::{Scalar, Tensor};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<T> {
    pub layer_id: String,
    pub handle: usize,
    pub rank: usize,
    /// `m × r`
    pub b: Tensor<T>,
    /// `r × n`
    pub a: Tensor<T>,
}

impl<T: Scalar> LoraAdapter<T> {
    pub fn param_count(&self) -> usize {
        self.a.numel() + self.b.numel()
    }

    /// `B·A`.
    pub fn delta(&self) -> Result<Tensor<T>> {
        self.b.matmul(&self.a)
    }
}

/// `W + B·A`, with no extra scaling.
pub fn effective_weight<T: Scalar>(weight: &Tensor<T>, adapter: &LoraAdapter<T>) -> Result<Tensor<T>> {
    let delta = adapter.delta()?;
    if delta.shape() != weight.shape() {
        return Err(Error::dim("effective_weight", weight.shape(), delta.shape()));
    }
    weight.add(&delta)
}

/// Graph nodes of one bound adapter.
#[derive(Clone, Copy, Debug)]
pub struct BoundAdapter {
    pub handle: usize,
    pub a: NodeId,
    pub b: NodeId,
}

/// Weight nodes for a forward pass plus the trainable adapter leaves.
#[derive(Clone, Debug)]
pub struct BoundWeights {
    pub weights: Vec<NodeId>,
    pub adapters: Vec<BoundAdapter>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSet<T> {
    adapters: BTreeMap<usize, LoraAdapter<T>>,
    registry: SubspaceRegistry,
    merged: bool,
}

impl<T: Scalar> AdapterSet<T> {
    /// Attaches one adapter per layer of `selection`. `A` is drawn layer by
    /// layer in forward order from a stream seeded by `seed`.
    pub fn attach(selection: &SubspaceRegistry, rank: usize, seed: u64) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Config("adapter rank must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("positive std");
        let mut adapters = BTreeMap::new();
        for d in selection.layers() {
            let max = d.rows.min(d.cols);
            if rank > max {
                return Err(Error::Rank {
                    layer: d.layer_id.clone(),
                    rank,
                    max,
                });
            }
            let a: Vec<f64> = (0..rank * d.cols).map(|_| normal.sample(&mut rng)).collect();
            adapters.insert(
                d.handle,
                LoraAdapter {
                    layer_id: d.layer_id.clone(),
                    handle: d.handle,
                    rank,
                    b: Tensor::zeros([d.rows, rank]),
                    a: Tensor::from_f64([rank, d.cols], &a)?,
                },
            );
        }
        Ok(Self {
            adapters,
            registry: selection.clone(),
            merged: false,
        })
    }

    /// Rebuilds a set from stored factors (checkpoint loading).
    pub fn from_parts(registry: SubspaceRegistry, adapters: Vec<LoraAdapter<T>>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for ad in adapters {
            let Some(d) = registry.get(&ad.layer_id) else {
                return Err(Error::State(format!("adapter for unregistered layer `{}`", ad.layer_id)));
            };
            check_shapes(d, &ad)?;
            if map.insert(ad.handle, ad).is_some() {
                return Err(Error::State("two adapters for one layer".into()));
            }
        }
        Ok(Self {
            adapters: map,
            registry,
            merged: false,
        })
    }

    pub fn registry(&self) -> &SubspaceRegistry {
        &self.registry
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn is_merged(&self) -> bool {
        self.merged
    }

    pub fn get(&self, handle: usize) -> Option<&LoraAdapter<T>> {
        self.adapters.get(&handle)
    }

    pub fn get_mut(&mut self, handle: usize) -> Option<&mut LoraAdapter<T>> {
        self.adapters.get_mut(&handle)
    }

    /// Adapters in forward order.
    pub fn iter(&self) -> impl Iterator<Item = &LoraAdapter<T>> {
        self.adapters.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut LoraAdapter<T>> {
        self.adapters.values_mut()
    }

    pub fn cast<U: Scalar>(&self) -> AdapterSet<U> {
        AdapterSet {
            adapters: self
                .adapters
                .iter()
                .map(|(&h, ad)| {
                    (
                        h,
                        LoraAdapter {
                            layer_id: ad.layer_id.clone(),
                            handle: ad.handle,
                            rank: ad.rank,
                            b: ad.b.cast(),
                            a: ad.a.cast(),
                        },
                    )
                })
                .collect(),
            registry: self.registry.clone(),
            merged: self.merged,
        }
    }

    /// Inserts base weights as constants and adapted layers as `W + B·A`
    /// with `A`, `B` as trainable leaves.
    pub fn bind(&self, g: &mut Graph<T>, model: &ToyDepthModel<T>) -> Result<BoundWeights> {
        let mut weights = Vec::with_capacity(model.layers().len());
        let mut bound = Vec::with_capacity(self.adapters.len());
        for (handle, layer) in model.layers().iter().enumerate() {
            let w = g.constant(layer.weight.clone());
            match self.adapters.get(&handle) {
                Some(ad) => {
                    let b = g.leaf(ad.b.clone().with_grad());
                    let a = g.leaf(ad.a.clone().with_grad());
                    let ba = g.matmul(b, a)?;
                    weights.push(g.add(w, ba)?);
                    bound.push(BoundAdapter { handle, a, b });
                }
                None => weights.push(w),
            }
        }
        Ok(BoundWeights { weights, adapters: bound })
    }

    /// Folds one adapter into its base weight and removes it.
    pub fn merge_layer(&mut self, model: &mut ToyDepthModel<T>, handle: usize) -> Result<()> {
        let Some(ad) = self.adapters.remove(&handle) else {
            return Err(Error::State(format!("no unmerged adapter on layer handle {handle}")));
        };
        let layer = model.layer_mut(handle);
        layer.weight = effective_weight(&layer.weight, &ad)?;
        Ok(())
    }

    /// Folds every adapter into the model (`W ← W + B·A`) and marks the
    /// model as carrying stage-1 weights.
    pub fn merge_into(&mut self, model: &mut ToyDepthModel<T>) -> Result<()> {
        if self.merged {
            return Err(Error::State("adapters already merged".into()));
        }
        let handles: Vec<usize> = self.adapters.keys().copied().collect();
        for h in handles {
            self.merge_layer(model, h)?;
        }
        self.merged = true;
        model.mark_stage1_merged();
        Ok(())
    }
}

fn check_shapes<T: Scalar>(d: &LayerDescriptor, ad: &LoraAdapter<T>) -> Result<()> {
    if ad.b.shape() != [d.rows, ad.rank] || ad.a.shape() != [ad.rank, d.cols] {
        return Err(Error::dim("adapter", ad.b.shape(), ad.a.shape()));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamStage {
    One,
    Two { projection_rank: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub adapter_params: usize,
    pub base_params: usize,
    pub total: usize,
    pub formatted_millions: String,
}

/// Formats a count in millions with one decimal, rounding half to even.
pub fn format_millions(total: usize) -> String {
    let tenths = total / 100_000;
    let rem = total % 100_000;
    let round_up = rem > 50_000 || (rem == 50_000 && tenths % 2 == 1);
    let tenths = tenths + usize::from(round_up);
    format!("{}.{}", tenths / 10, tenths % 10)
}

/// Parameter accounting: adapters contribute `m·r + r·n` per layer over the
/// base weights in `registry`; stage 2 adds, for every registry layer, the
/// mixing scalars (2), projector (`m·r̂`) and projected accumulator (`r̂·n`).
pub fn trainable_param_count<T: Scalar>(
    adapters: &AdapterSet<T>,
    registry: &SubspaceRegistry,
    stage: ParamStage,
) -> ParamCount {
    let mut adapter_params: usize = adapters
        .iter()
        .map(|a| a.rank * (a.b.shape()[0] + a.a.shape()[1]))
        .sum();
    if let ParamStage::Two { projection_rank } = stage {
        adapter_params += registry
            .layers()
            .iter()
            .map(|d| 2 + projection_rank * (d.rows + d.cols))
            .sum::<usize>();
    }
    let base_params = registry.layers().iter().map(|d| d.rows * d.cols).sum::<usize>();
    let total = base_params + adapter_params;
    ParamCount {
        adapter_params,
        base_params,
        total,
        formatted_millions: format_millions(total),
    }
}
