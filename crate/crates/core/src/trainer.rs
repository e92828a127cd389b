//! Deterministic end-to-end training: sample, forward, joint loss, backward,
//! AdamW, with per-step logging and resumable checkpoints.
//!
//! The batch stream is stateless in the step index (each step's batch seed is
//! derived from the master seed and the step), so a run resumed from a
//! checkpoint replays the exact batch sequence of an uninterrupted run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::{AnyAdapter, AdapterConfig};
use crate::checkpoint::{canonical_json, sha256_hex, Container};
use crate::dataset::{sample_batch, ConflictDataset, ConflictDatasetConfig};
use crate::error::{Error, Result};
use crate::objectives::{balance_stats, LossConfig};
use crate::optim::{adamw_update, clip_gradients, wsd_lr, AdamState, OptimConfig};
use crate::scalar::Scalar;
use crate::seeds;
use crate::tape::GradTape;
use crate::tensor::Tensor;

/// One completed optimization step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub task_loss: f64,
    pub aux_loss: f64,
    pub joint_loss: f64,
    /// Pre-clip global gradient norm.
    pub grad_norm: f64,
    /// Per-expert selection frequency this batch (empty for dense).
    pub expert_load: Vec<f64>,
}

/// Everything needed to reproduce a run bit-exactly, plus an optional
/// human-facing creation timestamp that is excluded from hashes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub adapter: AdapterConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub data: ConflictDatasetConfig,
    pub dataset_sha256: Option<String>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created: Option<String>,
}

impl RunManifest {
    pub fn new(
        adapter: AdapterConfig,
        loss: LossConfig,
        optim: OptimConfig,
        data: ConflictDatasetConfig,
        dataset_sha256: Option<String>,
    ) -> Self {
        let seed = optim.seed;
        RunManifest {
            version: 1,
            adapter,
            loss,
            optim,
            data,
            dataset_sha256,
            seed,
            created: None,
        }
    }

    /// Hash of the manifest with the `created` field stripped.
    pub fn canonical_hash(&self) -> Result<String> {
        let mut stripped = self.clone();
        stripped.created = None;
        Ok(sha256_hex(canonical_json(&stripped)?.as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub manifest: RunManifest,
    pub steps: Vec<StepRecord>,
}

impl TrainLog {
    /// Stable column order; expert-load columns only for MoE runs.
    pub fn to_csv(&self) -> String {
        let n_loads = self.steps.first().map_or(0, |s| s.expert_load.len());
        let mut out = String::from("step,lr,task_loss,aux_loss,joint_loss,grad_norm");
        for e in 0..n_loads {
            out.push_str(&format!(",load_e{e}"));
        }
        out.push('\n');
        for s in &self.steps {
            out.push_str(&format!(
                "{},{},{},{},{},{}",
                s.step, s.lr, s.task_loss, s.aux_loss, s.joint_loss, s.grad_norm
            ));
            for l in &s.expert_load {
                out.push_str(&format!(",{l}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Hook invoked before each parameter update, while the adapter still holds
/// the step's pre-update parameters.
pub trait TrainObserver<T: Scalar> {
    fn before_update(&mut self, step: usize, adapter: &AnyAdapter<T>);
}

pub struct TrainOutput<T: Scalar> {
    pub adapter: AnyAdapter<T>,
    pub state: AdamState<T>,
    pub log: TrainLog,
}

fn check_compat<T: Scalar>(
    ds: &ConflictDataset<T>,
    adapter_cfg: &AdapterConfig,
    loss_cfg: &LossConfig,
) -> Result<()> {
    if adapter_cfg.out_width() != ds.config.readout_dim {
        return Err(Error::InvalidConfig(format!(
            "adapter output width {} does not match data.readout_dim {}",
            adapter_cfg.out_width(),
            ds.config.readout_dim
        )));
    }
    if loss_cfg.vocab != ds.config.n_classes {
        return Err(Error::InvalidConfig(format!(
            "loss.vocab {} does not match data.n_classes {}",
            loss_cfg.vocab, ds.config.n_classes
        )));
    }
    Ok(())
}

/// One optimization step at `step`; the adapter and state are updated in
/// place and the step record is returned.
fn train_step<T: Scalar>(
    ds: &ConflictDataset<T>,
    adapter: &mut AnyAdapter<T>,
    state: &mut AdamState<T>,
    loss_cfg: &LossConfig,
    optim_cfg: &OptimConfig,
    step: usize,
) -> Result<StepRecord> {
    let lr = wsd_lr(step, optim_cfg);
    let batch_seed = seeds::derive(optim_cfg.seed, seeds::STREAM_BATCH, step as u64);
    let batch = sample_batch(ds, None, optim_cfg.batch_size, batch_seed)?;

    let mut tape = GradTape::new();
    let x = tape.leaf(batch.inputs.clone());
    let binding = adapter.bind(&mut tape);
    let fwd = adapter.forward_tape(&mut tape, &binding, x)?;
    let logits = tape.linear_frozen(fwd.output, &ds.readout)?;
    let task_id = tape.mean_nll(logits, &batch.labels)?;

    let acfg = adapter.config().clone();
    let (joint_id, aux_loss, expert_load) = if let (Some(records), Some(gates_id)) =
        (&fwd.routing, fwd.gates)
    {
        let stats = balance_stats(
            records,
            acfg.n_experts,
            acfg.n_shared,
            loss_cfg.raw_softmax_importance,
        )?;
        let aux_id = if loss_cfg.raw_softmax_importance {
            let full = tape.softmax(fwd.gate_logits.expect("router logits recorded"))?;
            tape.balance_penalty(full, &stats.load, acfg.n_shared)?
        } else {
            tape.balance_penalty(gates_id, &stats.load, acfg.n_shared)?
        };
        let scaled = tape.scale(aux_id, T::from_f64(loss_cfg.lambda));
        let joint = tape.add(task_id, scaled)?;
        let load: Vec<f64> = stats.load.iter().map(|&l| l.to_f64()).collect();
        (joint, stats.aux_loss.to_f64(), load)
    } else {
        (task_id, 0.0, Vec::new())
    };

    let task_loss = tape.value(task_id).scalar_value().to_f64();
    let joint_loss = tape.value(joint_id).scalar_value().to_f64();
    if !joint_loss.is_finite() {
        return Err(Error::Divergence { step, what: "loss" });
    }

    let mut grads_by_node = tape.backward(joint_id)?;
    let mut grads: Vec<Tensor<T>> = binding
        .ids
        .iter()
        .zip(adapter.named_params())
        .map(|(&id, (_, p))| grads_by_node.take_or_zeros(id, p.shape()))
        .collect();
    let grad_norm = clip_gradients(&mut grads, optim_cfg.clip_norm);
    if !grad_norm.is_finite() {
        return Err(Error::Divergence { step, what: "gradient" });
    }

    let decay = adapter.decay_mask();
    let mut params = adapter.named_params_mut();
    adamw_update(&mut params, &grads, &decay, state, lr, optim_cfg).map_err(|e| match e {
        Error::NonFinite { .. } => Error::Divergence { step, what: "gradient" },
        other => other,
    })?;

    Ok(StepRecord {
        step,
        lr,
        task_loss,
        aux_loss,
        joint_loss,
        grad_norm,
        expert_load,
    })
}

fn run_steps<T: Scalar>(
    ds: &ConflictDataset<T>,
    adapter: &mut AnyAdapter<T>,
    state: &mut AdamState<T>,
    loss_cfg: &LossConfig,
    optim_cfg: &OptimConfig,
    start_step: usize,
    steps_out: &mut Vec<StepRecord>,
    mut observer: Option<&mut dyn TrainObserver<T>>,
) -> Result<()> {
    for step in start_step..optim_cfg.total_steps {
        if let Some(obs) = observer.as_deref_mut() {
            obs.before_update(step, adapter);
        }
        // any non-finite value inside a step is a divergence at that step
        let record =
            train_step(ds, adapter, state, loss_cfg, optim_cfg, step).map_err(|e| match e {
                Error::NonFinite { op } => Error::Divergence { step, what: op },
                other => other,
            })?;
        steps_out.push(record);
    }
    Ok(())
}

/// Train a freshly initialized adapter for `optim_cfg.total_steps` steps.
/// Only adapter parameters train; the dataset's readout and maps are frozen.
pub fn train<T: Scalar>(
    ds: &ConflictDataset<T>,
    adapter_cfg: &AdapterConfig,
    loss_cfg: &LossConfig,
    optim_cfg: &OptimConfig,
    observer: Option<&mut dyn TrainObserver<T>>,
) -> Result<TrainOutput<T>> {
    adapter_cfg.validate()?;
    loss_cfg.validate()?;
    optim_cfg.validate()?;
    check_compat(ds, adapter_cfg, loss_cfg)?;

    let init_seed = seeds::derive(optim_cfg.seed, seeds::STREAM_INIT, 0);
    let mut adapter = AnyAdapter::init(adapter_cfg, init_seed)?;
    let mut state = AdamState::for_params(&adapter.named_params());
    let manifest = RunManifest::new(
        adapter_cfg.clone(),
        loss_cfg.clone(),
        optim_cfg.clone(),
        ds.config.clone(),
        None,
    );
    let mut steps = Vec::with_capacity(optim_cfg.total_steps);
    run_steps(ds, &mut adapter, &mut state, loss_cfg, optim_cfg, 0, &mut steps, observer)?;
    Ok(TrainOutput {
        adapter,
        state,
        log: TrainLog { manifest, steps },
    })
}

/// A loaded checkpoint: adapter and optimizer state at `step`.
pub struct CheckpointData<T: Scalar> {
    pub adapter: AnyAdapter<T>,
    pub state: AdamState<T>,
    pub manifest: RunManifest,
    pub step: usize,
}

/// Continue a checkpointed run up to `manifest.optim.total_steps`. The log
/// covers only the resumed steps.
pub fn resume<T: Scalar>(
    ds: &ConflictDataset<T>,
    ckpt: CheckpointData<T>,
    observer: Option<&mut dyn TrainObserver<T>>,
) -> Result<TrainOutput<T>> {
    let CheckpointData {
        mut adapter,
        mut state,
        manifest,
        step,
    } = ckpt;
    check_compat(ds, &manifest.adapter, &manifest.loss)?;
    let mut steps = Vec::new();
    run_steps(
        ds,
        &mut adapter,
        &mut state,
        &manifest.loss,
        &manifest.optim,
        step,
        &mut steps,
        observer,
    )?;
    Ok(TrainOutput {
        adapter,
        state,
        log: TrainLog { manifest, steps },
    })
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    manifest: RunManifest,
    step: usize,
}

/// Write adapter parameters and optimizer state as a container. Payload
/// dtype follows the scalar type, so resuming reproduces an uninterrupted
/// run bit-exactly.
pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    adapter: &AnyAdapter<T>,
    state: &AdamState<T>,
    manifest: &RunManifest,
    step: usize,
) -> Result<()> {
    let mut stripped = manifest.clone();
    stripped.created = None;
    let meta = serde_json::to_value(CheckpointMeta {
        manifest: stripped,
        step,
    })?;
    let mut c = Container::new("checkpoint", meta);
    for (i, (name, t)) in adapter.named_params().iter().enumerate() {
        c.push_tensor(&format!("param.{name}"), *t);
        c.push_tensor(&format!("adam.m.{name}"), &state.m[i]);
        c.push_tensor(&format!("adam.v.{name}"), &state.v[i]);
    }
    c.write(path)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<CheckpointData<T>> {
    let c = Container::read(path)?;
    if c.kind != "checkpoint" {
        return Err(Error::FormatError(format!(
            "expected a checkpoint container, got kind '{}'",
            c.kind
        )));
    }
    let meta: CheckpointMeta = serde_json::from_value(c.meta.clone())?;
    let mut adapter = AnyAdapter::<T>::init(&meta.manifest.adapter, 0)?;
    let mut m = Vec::new();
    let mut v = Vec::new();
    for (name, param) in adapter.named_params_mut() {
        let stored: Tensor<T> = c.get_tensor(&format!("param.{name}"))?;
        if stored.shape() != param.shape() {
            return Err(Error::ShapeMismatch {
                op: "load_checkpoint",
                expected: param.shape().to_vec(),
                got: stored.shape().to_vec(),
            });
        }
        *param = stored;
        m.push(c.get_tensor(&format!("adam.m.{name}"))?);
        v.push(c.get_tensor(&format!("adam.v.{name}"))?);
    }
    Ok(CheckpointData {
        adapter,
        state: AdamState {
            m,
            v,
            step: meta.step as u64,
        },
        manifest: meta.manifest,
        step: meta.step,
    })
}

/// Coefficient of variation of the expert load averaged over the last
/// `fraction` of logged steps. `None` for dense runs or empty windows.
pub fn load_cv_tail(log: &TrainLog, fraction: f64) -> Option<f64> {
    let n = log.steps.len();
    if n == 0 {
        return None;
    }
    let n_experts = log.steps[0].expert_load.len();
    if n_experts == 0 {
        return None;
    }
    let start = ((n as f64) * (1.0 - fraction)).floor() as usize;
    let window = &log.steps[start.min(n - 1)..];
    let mut mean_load = vec![0.0f64; n_experts];
    for s in window {
        for (e, &l) in s.expert_load.iter().enumerate() {
            mean_load[e] += l;
        }
    }
    for l in mean_load.iter_mut() {
        *l /= window.len() as f64;
    }
    let mean: f64 = mean_load.iter().sum::<f64>() / n_experts as f64;
    if mean == 0.0 {
        return None;
    }
    let var: f64 =
        mean_load.iter().map(|&l| (l - mean) * (l - mean)).sum::<f64>() / n_experts as f64;
    Some(var.sqrt() / mean)
}

/// Mean per-expert load over the last `fraction` of logged steps.
pub fn mean_load_tail(log: &TrainLog, fraction: f64) -> Option<Vec<f64>> {
    let n = log.steps.len();
    if n == 0 {
        return None;
    }
    let n_experts = log.steps[0].expert_load.len();
    if n_experts == 0 {
        return None;
    }
    let start = ((n as f64) * (1.0 - fraction)).floor() as usize;
    let window = &log.steps[start.min(n - 1)..];
    let mut mean_load = vec![0.0f64; n_experts];
    for s in window {
        for (e, &l) in s.expert_load.iter().enumerate() {
            mean_load[e] += l;
        }
    }
    for l in mean_load.iter_mut() {
        *l /= window.len() as f64;
    }
    Some(mean_load)
}
