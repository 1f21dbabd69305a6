//! Two-stage adaptation of depth-estimation networks.
//!
//! Stage 1 attaches low-rank adapters (`W + B·A`) to the convolution, MLP and
//! attention weight subspaces of a model. Stage 2 composes the merged stage-1
//! weights with an accumulated negative-gradient correction under learnable
//! per-layer mixing scalars, keeping optimizer state in a low-rank projected
//! form. The crate also carries the depth evaluation protocol, a synthetic
//! scene generator, a toy depth network and the training harness.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapters;
pub mod error;
pub mod graph;
pub mod harness;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod registry;
pub mod scenes;
pub mod stage2;
pub mod tensor;

pub use adapters::{AdapterSet, LoraAdapter, ParamCount, ParamStage};
pub use error::{Error, Result};
pub use graph::{GradientMap, Graph, NodeId};
pub use metrics::{DepthMetrics, EvalConfig, Scaling};
pub use model::{DepthMap, ModelConfig, ToyDepthModel};
pub use registry::{classify_layers, LayerDescriptor, SubspaceKind, SubspaceRegistry};
pub use scenes::{Scene, SceneConfig};
pub use stage2::{MemoryFootprint, MemoryMode, Stage2Composer, Stage2Config};
pub use tensor::{Scalar, Tensor};
