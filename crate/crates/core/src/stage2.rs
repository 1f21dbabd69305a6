//! Stage-2 full-parameter composition.
//!
//! Every registered layer gets a pair of learnable mixing scalars `(α, β)`
//! and a full-size correction `C` that accumulates the negative loss gradient.
//! The forward weight is `α·W¹ + β·C`, where `W¹` is the merged stage-1
//! weight. Optimizer state for the correction lives in a rank-`r̂` column
//! subspace: an orthonormal projector `P` (top left singular vectors of the
//! gradient, refreshed every `T` steps) and Adam moments of `Pᵀ·(−∇W)`.
//!
//! One step, per layer:
//!
//! ```text
//! G   = ∂L/∂W_eff
//! ∂α  = ⟨G, W¹⟩            ∂β = ⟨G, C⟩
//! P   = refresh(G)          every T steps
//! G̃   = Adam moments of Pᵀ·(−G)
//! C  += lr · P · Adam(G̃)
//! α,β ← Adam on (∂α, ∂β)
//! ```
//!
//! `α = 1, β = 0` at initialization, so stage 2 starts exactly at the stage-1
//! solution.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{GradientMap, Graph, NodeId};
use crate::model::ToyDepthModel;
use crate::optim::{AdamConfig, AdamState};
use crate::registry::SubspaceRegistry;
use crate::tensor::{Scalar, Tensor};

/// `−∇_W L` for the weight leaf `weight`.
pub fn full_param_direction<T: Scalar>(weight: NodeId, grads: &GradientMap<T>) -> Result<Tensor<T>> {
    grads
        .get(weight)
        .map(|g| g.scale(-T::one()))
        .ok_or_else(|| Error::State(format!("no gradient recorded for weight node {}", weight.index())))
}

/// `α·w_stage1 + β·direction`.
pub fn compose<T: Scalar>(w_stage1: &Tensor<T>, direction: &Tensor<T>, alpha: T, beta: T) -> Result<Tensor<T>> {
    if w_stage1.shape() != direction.shape() {
        return Err(Error::dim("compose", w_stage1.shape(), direction.shape()));
    }
    let data = w_stage1
        .data()
        .iter()
        .zip(direction.data())
        .map(|(&w, &d)| alpha * w + beta * d)
        .collect();
    Tensor::new(w_stage1.shape().to_vec(), data)
}

/// `Pᵀ·grad`.
pub fn project_gradient<T: Scalar>(grad: &Tensor<T>, projector: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = grad.dims2()?;
    let (pm, r) = projector.dims2()?;
    if pm != m {
        return Err(Error::dim("project_gradient", projector.shape(), grad.shape()));
    }
    Tensor::new([r, n], crate::kernels::matmul_tn(projector.data(), grad.data(), m, r, n))
}

/// `P·G̃`.
pub fn reconstruct<T: Scalar>(projector: &Tensor<T>, projected: &Tensor<T>) -> Result<Tensor<T>> {
    projector
        .matmul(projected)
        .map_err(|_| Error::dim("reconstruct", projector.shape(), projected.shape()))
}

/// First `rank` standard basis vectors as an `m × rank` matrix.
fn basis_columns<T: Scalar>(m: usize, rank: usize) -> Tensor<T> {
    let mut t = Tensor::zeros([m, rank]);
    for j in 0..rank {
        t.data_mut()[j * rank + j] = T::one();
    }
    t
}

/// Top-`rank` left singular vectors of `grad`, each column signed so that its
/// largest-magnitude entry is positive. An all-zero gradient keeps `previous`
/// (or the leading standard basis columns when there is none).
pub fn refresh_projector<T: Scalar>(grad: &Tensor<T>, rank: usize, previous: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (m, n) = grad.dims2()?;
    if rank == 0 || rank > m.min(n) {
        return Err(Error::Config(format!(
            "projection rank {rank} outside 1..={} for a {m}×{n} gradient",
            m.min(n)
        )));
    }
    if !grad.is_finite() {
        return Err(Error::Domain("non-finite gradient in projector refresh".into()));
    }
    if grad.data().iter().all(|v| *v == T::zero()) {
        return Ok(match previous {
            Some(p) if p.shape() == [m, rank] => p.clone(),
            _ => basis_columns(m, rank),
        });
    }
    let mat = DMatrix::from_row_slice(m, n, &grad.to_f64_vec());
    let svd = mat.svd(true, false);
    let u = svd.u.ok_or_else(|| Error::State("SVD did not return left singular vectors".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let mut out = vec![T::zero(); m * rank];
    for (j, &col) in order.iter().take(rank).enumerate() {
        let column = u.column(col);
        let mut pivot = 0;
        for i in 1..m {
            if column[i].abs() > column[pivot].abs() {
                pivot = i;
            }
        }
        let sign = if column[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..m {
            out[i * rank + j] = T::of(sign * column[i]);
        }
    }
    Tensor::new([m, rank], out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MemoryMode {
    FullAdam,
    Projected,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerFootprint {
    pub layer_id: String,
    pub floats: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct MemoryFootprint {
    pub mode: MemoryMode,
    pub rank: usize,
    pub floats_per_layer: Vec<LayerFootprint>,
    pub total_floats: usize,
}

/// Optimizer-state floats per layer: full Adam keeps two `m×n` moments; the
/// projected form keeps `P` (`m·r̂`), two `r̂×n` moments and `α, β`.
pub fn memory_footprint(registry: &SubspaceRegistry, mode: MemoryMode, rank: usize) -> Result<MemoryFootprint> {
    if mode == MemoryMode::Projected && rank == 0 {
        return Err(Error::Config("projection rank must be at least 1".into()));
    }
    let floats_per_layer: Vec<LayerFootprint> = registry
        .layers()
        .into_iter()
        .map(|d| LayerFootprint {
            layer_id: d.layer_id.clone(),
            floats: match mode {
                MemoryMode::FullAdam => 2 * d.rows * d.cols,
                MemoryMode::Projected => d.rows * rank + 2 * rank * d.cols + 2,
            },
        })
        .collect();
    let total_floats = floats_per_layer.iter().map(|l| l.floats).sum();
    Ok(MemoryFootprint {
        mode,
        rank,
        floats_per_layer,
        total_floats,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    /// Projection rank `r̂`.
    pub rank: usize,
    /// Projector refresh period `T`, in steps.
    pub refresh_period: usize,
    /// Learning rate of the correction; also the scale applied to the
    /// reconstructed direction.
    pub lr: f64,
    /// Learning rate of `α` and `β`.
    pub scalar_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            rank: 4,
            refresh_period: 50,
            lr: 1e-4,
            scalar_lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("stage2.rank must be at least 1".into()));
        }
        if self.refresh_period == 0 {
            return Err(Error::Config("stage2.refresh_period must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.scalar_lr >= 0.0) {
            return Err(Error::Config("stage2 learning rates must be non-negative".into()));
        }
        Ok(())
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage2State<T> {
    pub layer_id: String,
    pub handle: usize,
    pub alpha: T,
    pub beta: T,
    /// `m × r̂`, orthonormal columns.
    pub projector: Tensor<T>,
    /// Projected first/second moments, `r̂ × n` each; the first is the
    /// momentum-smoothed projected negative gradient.
    pub moments: AdamState<T>,
    /// Accumulated full-parameter correction, `m × n`.
    pub correction: Tensor<T>,
    /// Adam moments of `(α, β)`.
    pub scalar_moments: AdamState<T>,
    pub refresh_period: usize,
    pub step_counter: u64,
}

impl<T: Scalar> Stage2State<T> {
    fn new(layer_id: String, handle: usize, m: usize, n: usize, cfg: &Stage2Config) -> Result<Self> {
        if cfg.rank > m.min(n) {
            return Err(Error::Rank {
                layer: layer_id,
                rank: cfg.rank,
                max: m.min(n),
            });
        }
        Ok(Self {
            layer_id,
            handle,
            alpha: T::one(),
            beta: T::zero(),
            projector: basis_columns(m, cfg.rank),
            moments: AdamState::for_shape(&[cfg.rank, n]),
            correction: Tensor::zeros([m, n]),
            scalar_moments: AdamState::for_shape(&[2]),
            refresh_period: cfg.refresh_period,
            step_counter: 0,
        })
    }

    /// `α·W¹ + β·C`.
    pub fn effective_weight(&self, w_stage1: &Tensor<T>) -> Result<Tensor<T>> {
        compose(w_stage1, &self.correction, self.alpha, self.beta)
    }
}

/// Per-layer gradients of one stage-2 step.
#[derive(Clone, Debug)]
pub struct LayerGrads<T> {
    pub weight: Tensor<T>,
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Clone, Debug)]
pub struct Stage2Bound {
    pub weights: Vec<NodeId>,
    /// `(state index, composed weight leaf)`.
    pub composed: Vec<(usize, NodeId)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Composer<T> {
    cfg: Stage2Config,
    states: Vec<Stage2State<T>>,
}

impl<T: Scalar> Stage2Composer<T> {
    /// Requires a model whose stage-1 adapters have been merged.
    pub fn new(model: &ToyDepthModel<T>, registry: &SubspaceRegistry, cfg: Stage2Config) -> Result<Self> {
        cfg.validate()?;
        if !model.stage1_merged() {
            return Err(Error::Schedule("stage 2 requires merged stage-1 weights".into()));
        }
        let states = registry
            .layers()
            .into_iter()
            .map(|d| Stage2State::new(d.layer_id.clone(), d.handle, d.rows, d.cols, &cfg))
            .collect::<Result<_>>()?;
        Ok(Self { cfg, states })
    }

    pub fn from_states(cfg: Stage2Config, states: Vec<Stage2State<T>>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, states })
    }

    pub fn config(&self) -> &Stage2Config {
        &self.cfg
    }

    pub fn states(&self) -> &[Stage2State<T>] {
        &self.states
    }

    pub fn states_mut(&mut self) -> &mut [Stage2State<T>] {
        &mut self.states
    }

    /// Composed layers enter as trainable leaves; the rest as constants.
    pub fn bind(&self, g: &mut Graph<T>, model: &ToyDepthModel<T>) -> Result<Stage2Bound> {
        let mut weights = model.bind_frozen(g);
        let mut composed = Vec::with_capacity(self.states.len());
        for (i, st) in self.states.iter().enumerate() {
            let w = st.effective_weight(&model.layer(st.handle).weight)?;
            let id = g.leaf(w.with_grad());
            weights[st.handle] = id;
            composed.push((i, id));
        }
        Ok(Stage2Bound { weights, composed })
    }

    /// `∂L/∂W_eff`, `∂L/∂α = ⟨∂L/∂W_eff, W¹⟩` and `∂L/∂β = ⟨∂L/∂W_eff, C⟩` per layer.
    pub fn gradients(
        &self,
        model: &ToyDepthModel<T>,
        bound: &Stage2Bound,
        grads: &GradientMap<T>,
    ) -> Result<Vec<LayerGrads<T>>> {
        bound
            .composed
            .iter()
            .map(|&(i, node)| {
                let st = &self.states[i];
                let weight = full_param_direction(node, grads)?.scale(-T::one());
                Ok(LayerGrads {
                    alpha: weight.dot(&model.layer(st.handle).weight)?,
                    beta: weight.dot(&st.correction)?,
                    weight,
                })
            })
            .collect()
    }

    /// Applies one optimization step from per-layer gradients (in state order).
    pub fn apply(&mut self, grads: &[LayerGrads<T>]) -> Result<()> {
        if grads.len() != self.states.len() {
            return Err(Error::dim("stage2_apply", &[grads.len()], &[self.states.len()]));
        }
        let corr_cfg = self.cfg.adam(self.cfg.lr);
        let scalar_cfg = self.cfg.adam(self.cfg.scalar_lr);
        for (st, lg) in self.states.iter_mut().zip(grads) {
            let t = st.step_counter + 1;
            if st.step_counter % st.refresh_period as u64 == 0 {
                st.projector = refresh_projector(&lg.weight, self.cfg.rank, Some(&st.projector))?;
            }
            let descent = lg.weight.scale(-T::one());
            let projected = project_gradient(&descent, &st.projector)?;
            let normalized = st.moments.direction(&projected, t, &corr_cfg)?;
            let step = reconstruct(&st.projector, &normalized)?;
            st.correction.axpy(T::of(self.cfg.lr), &step)?;

            let scalar_grad = Tensor::new([2], vec![T::of(lg.alpha), T::of(lg.beta)])?;
            let dir = st.scalar_moments.direction(&scalar_grad, t, &scalar_cfg)?;
            st.alpha -= T::of(scalar_cfg.lr) * dir.data()[0];
            st.beta -= T::of(scalar_cfg.lr) * dir.data()[1];
            st.step_counter = t;
        }
        Ok(())
    }

    /// Copy of `model` with every composed layer's weight replaced by `α·W¹ + β·C`.
    pub fn materialize(&self, model: &ToyDepthModel<T>) -> Result<ToyDepthModel<T>> {
        let mut out = model.clone();
        for st in &self.states {
            let w = st.effective_weight(&model.layer(st.handle).weight)?;
            out.layer_mut(st.handle).weight = w;
        }
        Ok(out)
    }
}
