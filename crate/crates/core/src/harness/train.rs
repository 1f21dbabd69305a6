//! Stage-1 and stage-2 training schedules.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::adapters::{trainable_param_count, AdapterSet, LoraAdapter, ParamCount, ParamStage};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::harness::checkpoint::Checkpoint;
use crate::harness::config::RunConfig;
use crate::harness::dataset::{DepthDataset, Frame, SyntheticDataset};
use crate::harness::eval::{evaluate, csv_error, stack, Predictor};
use crate::metrics::DepthMetrics;
use crate::model::{training_loss, ToyDepthModel};
use crate::optim::{AdamConfig, AdamState};
use crate::registry::{classify_layers, SubspaceKind, SubspaceRegistry};
use crate::scenes::make_split;
use crate::stage2::{memory_footprint, MemoryMode, Stage2Composer, Stage2State};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Stage {
    One,
    Two,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }

    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            _ => Err(Error::Config(format!("stage must be 1 or 2, got {n}"))),
        }
    }
}

const ADAPTER_SALT: u64 = 0xA11C_E5ED;

/// SplitMix64 finalizer over a combined key; gives independent seeds per
/// (run seed, purpose, step).
fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Indices of the training frames used at 0-based `step`.
pub fn batch_indices(seed: u64, stage: Stage, step: u64, n_train: usize, batch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(seed, stage.number() as u64), step));
    let mut idx = sample(&mut rng, n_train, batch.min(n_train)).into_vec();
    idx.sort_unstable();
    idx
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Run {
    pub model: ToyDepthModel<f32>,
    pub adapters: AdapterSet<f32>,
    /// Adam state of `(A, B)` per adapted layer handle.
    pub moments: BTreeMap<usize, (AdamState<f32>, AdamState<f32>)>,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Run {
    /// Holds the merged stage-1 weights `W¹`, which stay fixed.
    pub model: ToyDepthModel<f32>,
    pub composer: Stage2Composer<f32>,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrainState {
    One(Stage1Run),
    Two(Stage2Run),
}

impl Stage1Run {
    /// Fresh model and freshly attached adapters on the enabled subspaces.
    pub fn init(cfg: &RunConfig) -> Result<Self> {
        let model = ToyDepthModel::build(&cfg.model_config())?;
        let selection = classify_layers(&model)?.select_subspaces(&cfg.stage1.subspaces)?;
        let adapters = AdapterSet::attach(&selection, cfg.stage1.rank, mix(cfg.seed, ADAPTER_SALT))?;
        let moments = adapters
            .iter()
            .map(|ad| {
                (
                    ad.handle,
                    (AdamState::for_shape(ad.a.shape()), AdamState::for_shape(ad.b.shape())),
                )
            })
            .collect();
        Ok(Self {
            model,
            adapters,
            moments,
            step: 0,
        })
    }
}

impl Stage2Run {
    /// Merges the stage-1 adapters into the base weights and starts stage 2
    /// with `α = 1`, `β = 0` on every registered layer.
    pub fn from_stage1(s1: Stage1Run, cfg: &RunConfig) -> Result<Self> {
        let Stage1Run { mut model, mut adapters, .. } = s1;
        adapters.merge_into(&mut model)?;
        let registry = classify_layers(&model)?;
        let composer = Stage2Composer::new(&model, &registry, cfg.stage2.optim())?;
        Ok(Self {
            model,
            composer,
            step: 0,
        })
    }
}

fn layer_key(id: &str, part: &str) -> String {
    format!("layer.{id}.{part}")
}

fn adapter_key(id: &str, part: &str) -> String {
    format!("adapter.{id}.{part}")
}

fn stage2_key(id: &str, part: &str) -> String {
    format!("stage2.{id}.{part}")
}

fn check_shape(name: &str, t: &Tensor<f32>, shape: &[usize]) -> Result<()> {
    if t.shape() != shape {
        return Err(Error::State(format!(
            "checkpoint tensor `{name}` has shape {:?}, model expects {shape:?}",
            t.shape()
        )));
    }
    Ok(())
}

fn take(ckpt: &Checkpoint, name: &str, shape: &[usize]) -> Result<Tensor<f32>> {
    let t = ckpt.require(name)?;
    check_shape(name, t, shape)?;
    Ok(t.clone())
}

fn scalar(t: &Tensor<f32>) -> f32 {
    t.data()[0]
}

impl TrainState {
    pub fn stage(&self) -> Stage {
        match self {
            TrainState::One(_) => Stage::One,
            TrainState::Two(_) => Stage::Two,
        }
    }

    pub fn step(&self) -> u64 {
        match self {
            TrainState::One(s) => s.step,
            TrainState::Two(s) => s.step,
        }
    }

    pub fn model(&self) -> &ToyDepthModel<f32> {
        match self {
            TrainState::One(s) => &s.model,
            TrainState::Two(s) => &s.model,
        }
    }

    /// The model with adapters (stage 1) or the composition (stage 2)
    /// folded into its weights.
    pub fn effective_model(&self) -> Result<ToyDepthModel<f32>> {
        match self {
            TrainState::One(s) => {
                let mut model = s.model.clone();
                s.adapters.clone().merge_into(&mut model)?;
                Ok(model)
            }
            TrainState::Two(s) => s.composer.materialize(&s.model),
        }
    }

    pub fn to_checkpoint(&self, cfg: &RunConfig) -> Checkpoint {
        let mut c = Checkpoint::new(self.stage().number(), self.step(), cfg.clone());
        for l in self.model().layers() {
            c.push(layer_key(&l.id, "weight"), l.weight.clone());
            c.push(layer_key(&l.id, "bias"), l.bias.clone());
        }
        match self {
            TrainState::One(s) => {
                for ad in s.adapters.iter() {
                    let (ma, mb) = &s.moments[&ad.handle];
                    c.push(adapter_key(&ad.layer_id, "a"), ad.a.clone());
                    c.push(adapter_key(&ad.layer_id, "b"), ad.b.clone());
                    c.push(adapter_key(&ad.layer_id, "a.adam_m"), ma.m.clone());
                    c.push(adapter_key(&ad.layer_id, "a.adam_v"), ma.v.clone());
                    c.push(adapter_key(&ad.layer_id, "b.adam_m"), mb.m.clone());
                    c.push(adapter_key(&ad.layer_id, "b.adam_v"), mb.v.clone());
                }
            }
            TrainState::Two(s) => {
                for st in s.composer.states() {
                    let id = &st.layer_id;
                    c.push(stage2_key(id, "alpha"), Tensor::scalar(st.alpha));
                    c.push(stage2_key(id, "beta"), Tensor::scalar(st.beta));
                    c.push(stage2_key(id, "projector"), st.projector.clone());
                    c.push(stage2_key(id, "correction"), st.correction.clone());
                    c.push(stage2_key(id, "adam_m"), st.moments.m.clone());
                    c.push(stage2_key(id, "adam_v"), st.moments.v.clone());
                    c.push(stage2_key(id, "scalar_adam_m"), st.scalar_moments.m.clone());
                    c.push(stage2_key(id, "scalar_adam_v"), st.scalar_moments.v.clone());
                }
            }
        }
        c
    }

    /// Rebuilds training state from a checkpoint written by [`TrainState::to_checkpoint`].
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let cfg = &ckpt.config;
        let mut model = ToyDepthModel::<f32>::build(&cfg.model_config())?;
        for h in 0..model.layers().len() {
            let layer = model.layer_mut(h);
            let wk = layer_key(&layer.id, "weight");
            let bk = layer_key(&layer.id, "bias");
            layer.weight = take(ckpt, &wk, layer.weight.shape())?;
            layer.bias = take(ckpt, &bk, layer.bias.shape())?;
        }
        match Stage::from_number(ckpt.stage)? {
            Stage::One => {
                let selection = classify_layers(&model)?.select_subspaces(&cfg.stage1.subspaces)?;
                let r = cfg.stage1.rank;
                let mut adapters = Vec::new();
                let mut moments = BTreeMap::new();
                for d in selection.layers() {
                    let (m, n) = (d.rows, d.cols);
                    let id = &d.layer_id;
                    let get = |part: &str, shape: &[usize]| take(ckpt, &adapter_key(id, part), shape);
                    adapters.push(LoraAdapter {
                        layer_id: id.clone(),
                        handle: d.handle,
                        rank: r,
                        a: get("a", &[r, n])?,
                        b: get("b", &[m, r])?,
                    });
                    moments.insert(
                        d.handle,
                        (
                            AdamState {
                                m: get("a.adam_m", &[r, n])?,
                                v: get("a.adam_v", &[r, n])?,
                            },
                            AdamState {
                                m: get("b.adam_m", &[m, r])?,
                                v: get("b.adam_v", &[m, r])?,
                            },
                        ),
                    );
                }
                let adapters = AdapterSet::from_parts(selection, adapters)?;
                Ok(TrainState::One(Stage1Run {
                    model,
                    adapters,
                    moments,
                    step: ckpt.step,
                }))
            }
            Stage::Two => {
                model.mark_stage1_merged();
                let registry = classify_layers(&model)?;
                let opt = cfg.stage2.optim();
                let r = opt.rank;
                let mut states = Vec::new();
                for d in registry.layers() {
                    let (m, n) = (d.rows, d.cols);
                    let id = &d.layer_id;
                    let get = |part: &str, shape: &[usize]| take(ckpt, &stage2_key(id, part), shape);
                    states.push(Stage2State {
                        layer_id: id.clone(),
                        handle: d.handle,
                        alpha: scalar(&get("alpha", &[])?),
                        beta: scalar(&get("beta", &[])?),
                        projector: get("projector", &[m, r])?,
                        moments: AdamState {
                            m: get("adam_m", &[r, n])?,
                            v: get("adam_v", &[r, n])?,
                        },
                        correction: get("correction", &[m, n])?,
                        scalar_moments: AdamState {
                            m: get("scalar_adam_m", &[2])?,
                            v: get("scalar_adam_v", &[2])?,
                        },
                        refresh_period: opt.refresh_period,
                        step_counter: ckpt.step,
                    });
                }
                let composer = Stage2Composer::from_states(opt, states)?;
                Ok(TrainState::Two(Stage2Run {
                    model,
                    composer,
                    step: ckpt.step,
                }))
            }
        }
    }
}

/// SHA-256 over every base weight and bias, in layer order.
pub fn base_weight_digest(model: &ToyDepthModel<f32>) -> String {
    let mut h = Sha256::new();
    for l in model.layers() {
        h.update(l.id.as_bytes());
        h.update(l.weight.to_le_f32_bytes());
        h.update(l.bias.to_le_f32_bytes());
    }
    hex::encode(h.finalize())
}

/// Training and validation frames of a run, generated once.
#[derive(Clone, Debug)]
pub struct RunData {
    pub train: Vec<Frame>,
    pub val: Vec<Frame>,
    pub test: Vec<Frame>,
}

impl RunData {
    pub fn synthetic(cfg: &RunConfig) -> Result<Self> {
        let split = make_split(cfg.split.train, cfg.split.val, cfg.split.test)?;
        let frames = |set| SyntheticDataset { scene: cfg.scene.clone(), set }.frames();
        Ok(Self {
            train: frames(split.train)?,
            val: frames(split.val)?,
            test: frames(split.test)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerMemory {
    pub layer_id: String,
    pub full_adam: usize,
    pub projected: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MemoryReport {
    pub projection_rank: usize,
    pub full_adam_floats: usize,
    pub projected_floats: usize,
    pub projected_fraction: f64,
    pub layers: Vec<LayerMemory>,
}

pub fn memory_report(registry: &SubspaceRegistry, rank: usize) -> Result<MemoryReport> {
    let full = memory_footprint(registry, MemoryMode::FullAdam, rank)?;
    let proj = memory_footprint(registry, MemoryMode::Projected, rank)?;
    Ok(MemoryReport {
        projection_rank: rank,
        full_adam_floats: full.total_floats,
        projected_floats: proj.total_floats,
        projected_fraction: proj.total_floats as f64 / full.total_floats as f64,
        layers: full
            .floats_per_layer
            .iter()
            .zip(&proj.floats_per_layer)
            .map(|(f, p)| LayerMemory {
                layer_id: f.layer_id.clone(),
                full_adam: f.floats,
                projected: p.floats,
            })
            .collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossPoint {
    pub step: u64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub stage: u8,
    pub seed: u64,
    pub start_step: u64,
    pub end_step: u64,
    pub subspaces: Vec<SubspaceKind>,
    pub param_count: ParamCount,
    pub memory: MemoryReport,
    pub val_initial: DepthMetrics,
    pub val_final: DepthMetrics,
    pub final_loss: Option<f64>,
    pub base_weights_sha256_before: String,
    pub base_weights_sha256_after: String,
    pub checkpoint_sha256: String,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub report: RunReport,
    pub state: TrainState,
    pub checkpoint: Checkpoint,
    pub loss_curve: Vec<LossPoint>,
    pub out_dir: PathBuf,
}

fn adam(cfg: &RunConfig) -> AdamConfig {
    AdamConfig::with_lr(cfg.stage1.lr)
}

/// One stage-1 step on a batch; returns the loss.
pub fn stage1_step(s: &mut Stage1Run, rgb: &Tensor<f32>, gt: &Tensor<f32>, opt: &AdamConfig) -> Result<f64> {
    let mut g = Graph::new();
    let bound = s.adapters.bind(&mut g, &s.model)?;
    let depth = s.model.forward_graph(&mut g, &bound.weights, rgb)?;
    let loss = training_loss(&mut g, depth, gt)?;
    let value = g.value(loss).item() as f64;
    let grads = g.backward(loss)?;
    let t = s.step + 1;
    for ba in &bound.adapters {
        let ga = grads
            .get(ba.a)
            .ok_or_else(|| Error::State("adapter factor A received no gradient".into()))?;
        let gb = grads
            .get(ba.b)
            .ok_or_else(|| Error::State("adapter factor B received no gradient".into()))?;
        let ad = s.adapters.get_mut(ba.handle).expect("bound adapter exists");
        let (ma, mb) = s.moments.get_mut(&ba.handle).expect("adapter moments exist");
        ma.step(&mut ad.a, ga, t, opt)?;
        mb.step(&mut ad.b, gb, t, opt)?;
    }
    s.step = t;
    Ok(value)
}

/// One stage-2 step on a batch; returns the loss.
pub fn stage2_step(s: &mut Stage2Run, rgb: &Tensor<f32>, gt: &Tensor<f32>) -> Result<f64> {
    let mut g = Graph::new();
    let bound = s.composer.bind(&mut g, &s.model)?;
    let depth = s.model.forward_graph(&mut g, &bound.weights, rgb)?;
    let loss = training_loss(&mut g, depth, gt)?;
    let value = g.value(loss).item() as f64;
    let grads = g.backward(loss)?;
    let lg = s.composer.gradients(&s.model, &bound, &grads)?;
    s.composer.apply(&lg)?;
    s.step += 1;
    Ok(value)
}

fn batch(data: &RunData, seed: u64, stage: Stage, step: u64, size: usize) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let idx = batch_indices(seed, stage, step, data.train.len(), size);
    stack(idx.iter().map(|&i| &data.train[i]))
}

/// Runs the schedule of `stage` from `state` up to the configured step count.
pub fn run_schedule(
    cfg: &RunConfig,
    state: &mut TrainState,
    data: &RunData,
) -> Result<Vec<LossPoint>> {
    let mut curve = Vec::new();
    match state {
        TrainState::One(s) => {
            let opt = adam(cfg);
            let end = cfg.stage1.steps as u64;
            while s.step < end {
                let (rgb, gt) = batch(data, cfg.seed, Stage::One, s.step, cfg.stage1.batch_size)?;
                let loss = stage1_step(s, &rgb, &gt, &opt)?;
                if s.step % cfg.log_every as u64 == 0 || s.step == 1 || s.step == end {
                    curve.push(LossPoint { step: s.step, loss });
                }
            }
        }
        TrainState::Two(s) => {
            let end = cfg.stage2.steps as u64;
            while s.step < end {
                let (rgb, gt) = batch(data, cfg.seed, Stage::Two, s.step, cfg.stage2.batch_size)?;
                let loss = stage2_step(s, &rgb, &gt)?;
                if s.step % cfg.log_every as u64 == 0 || s.step == 1 || s.step == end {
                    curve.push(LossPoint { step: s.step, loss });
                }
            }
        }
    }
    Ok(curve)
}

/// Initial training state for `stage`, optionally resumed from a checkpoint.
///
/// Stage 1 resumes only from a stage-1 checkpoint. Stage 2 requires one:
/// a stage-1 checkpoint is merged and stage 2 starts at step 0; a stage-2
/// checkpoint continues where it stopped.
pub fn initial_state(cfg: &RunConfig, stage: Stage, resume: Option<&Checkpoint>) -> Result<TrainState> {
    let Some(ckpt) = resume else {
        return match stage {
            Stage::One => Ok(TrainState::One(Stage1Run::init(cfg)?)),
            Stage::Two => Err(Error::Schedule("stage 2 needs a stage-1 checkpoint to resume from".into())),
        };
    };
    if ckpt.config.model != cfg.model {
        return Err(Error::Config(
            "model: configuration differs from the one stored in the resumed checkpoint".into(),
        ));
    }
    match (stage, TrainState::from_checkpoint(ckpt)?) {
        (Stage::One, TrainState::One(s)) => {
            let old = &ckpt.config.stage1;
            if (old.rank, &old.subspaces) != (cfg.stage1.rank, &cfg.stage1.subspaces) {
                return Err(Error::Config(
                    "stage1.rank/subspaces differ from the resumed checkpoint".into(),
                ));
            }
            Ok(TrainState::One(s))
        }
        (Stage::One, TrainState::Two(_)) => Err(Error::Schedule(
            "cannot resume stage 1 from a stage-2 checkpoint".into(),
        )),
        (Stage::Two, TrainState::One(s)) => Ok(TrainState::Two(Stage2Run::from_stage1(s, cfg)?)),
        (Stage::Two, TrainState::Two(mut s)) => {
            if ckpt.config.stage2.rank != cfg.stage2.rank {
                return Err(Error::Config("stage2.rank differs from the resumed checkpoint".into()));
            }
            let mut states = s.composer.states().to_vec();
            for st in &mut states {
                st.refresh_period = cfg.stage2.refresh_period;
            }
            s.composer = Stage2Composer::from_states(cfg.stage2.optim(), states)?;
            Ok(TrainState::Two(s))
        }
    }
}

fn write_loss_csv(path: &Path, curve: &[LossPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for p in curve {
        w.serialize(p).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Output directory of a stage within the run directory.
pub fn stage_dir(out_dir: &Path, stage: Stage) -> PathBuf {
    out_dir.join(format!("stage{}", stage.number()))
}

/// Trains with pre-generated data and writes checkpoint, loss curve and
/// report under `<out_dir>/stage<N>/`.
pub fn train_with_data(
    cfg: &RunConfig,
    stage: Stage,
    resume: Option<&Checkpoint>,
    data: &RunData,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut state = initial_state(cfg, stage, resume)?;
    let start_step = state.step();
    let before = base_weight_digest(state.model());
    let val_initial = evaluate(
        &Predictor::Model(Box::new(state.effective_model()?)),
        &data.val,
        &cfg.eval,
        1.0,
        cfg.eval_batch,
    )?
    .aggregate;

    let curve = run_schedule(cfg, &mut state, data)?;

    let after = base_weight_digest(state.model());
    if before != after {
        return Err(Error::State(format!(
            "frozen base weights changed during stage {} training",
            stage.number()
        )));
    }
    let val_final = evaluate(
        &Predictor::Model(Box::new(state.effective_model()?)),
        &data.val,
        &cfg.eval,
        1.0,
        cfg.eval_batch,
    )?
    .aggregate;

    let checkpoint = state.to_checkpoint(cfg);

    let full_registry = classify_layers(state.model())?;
    let (param_count, subspaces) = match &state {
        TrainState::One(s) => (
            trainable_param_count(&s.adapters, &full_registry, ParamStage::One),
            s.adapters.registry().kinds().into_iter().collect(),
        ),
        TrainState::Two(s) => (
            trainable_param_count(
                &AdapterSet::<f32>::from_parts(full_registry.clone(), Vec::new())?,
                &full_registry,
                ParamStage::Two {
                    projection_rank: s.composer.config().rank,
                },
            ),
            full_registry.kinds().into_iter().collect(),
        ),
    };
    let report = RunReport {
        stage: stage.number(),
        seed: cfg.seed,
        start_step,
        end_step: state.step(),
        subspaces,
        param_count,
        memory: memory_report(&full_registry, cfg.stage2.rank)?,
        val_initial,
        val_final,
        final_loss: curve.last().map(|p| p.loss),
        base_weights_sha256_before: before,
        base_weights_sha256_after: after,
        checkpoint_sha256: checkpoint.digest(),
    };

    let dir = stage_dir(&cfg.out_dir, stage);
    checkpoint.save(&dir.join("checkpoint"))?;
    write_loss_csv(&dir.join("loss.csv"), &curve)?;
    write_json(&dir.join("report.json"), &report)?;
    Ok(TrainOutcome {
        report,
        state,
        checkpoint,
        loss_curve: curve,
        out_dir: dir,
    })
}

/// `train`: generates the synthetic split and runs one stage.
pub fn cmd_train(cfg: &RunConfig, stage: Stage, resume: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let ckpt = resume.map(Checkpoint::load).transpose()?;
    if stage == Stage::Two && ckpt.is_none() {
        return Err(Error::Schedule(
            "stage 2 needs a stage-1 checkpoint (--resume PATH)".into(),
        ));
    }
    let data = RunData::synthetic(cfg)?;
    train_with_data(cfg, stage, ckpt.as_ref(), &data)
}
