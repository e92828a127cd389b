//! Diagnostic instruments for multi-task optimization behavior:
//! per-category flat gradients, pairwise gradient cosine matrices, influence
//! scores from simulated single-task updates, and expert activation rates.
//!
//! Every operation here leaves the adapter parameters bitwise unchanged;
//! probe updates run on cloned parameter vectors.

use serde::{Deserialize, Serialize};

use crate::adapter::{count_params, AdapterConfig, AnyAdapter, MoEAdapter, ParamCounts};
use crate::dataset::{batch_task_loss, category_label, sample_batch, ConflictDataset};
use crate::error::{Error, Result};
use crate::objectives::balance_stats;
use crate::scalar::Scalar;
use crate::seeds;
use crate::tape::GradTape;
use crate::tensor::Tensor;
use crate::trainer::TrainObserver;

/// Flat task-loss gradient over all trainable adapter parameters, in
/// canonical parameter order.
#[derive(Debug, Clone)]
pub struct FlatGradient<T> {
    pub category: usize,
    pub values: Vec<T>,
    pub batch_size: usize,
    pub seed: u64,
}

/// Mean task-loss gradient over one per-category batch, flattened in
/// canonical order. The balance penalty is excluded unless `include_aux`
/// (with weight `lambda`) is requested.
pub fn category_gradient_with<T: Scalar>(
    adapter: &AnyAdapter<T>,
    readout: &Tensor<T>,
    ds: &ConflictDataset<T>,
    category: usize,
    batch_size: usize,
    seed: u64,
    include_aux: bool,
    lambda: f64,
) -> Result<FlatGradient<T>> {
    let batch = sample_batch(ds, Some(category), batch_size, seed)?;
    let mut tape = GradTape::new();
    let x = tape.leaf(batch.inputs.clone());
    let binding = adapter.bind(&mut tape);
    let fwd = adapter.forward_tape(&mut tape, &binding, x)?;
    let logits = tape.linear_frozen(fwd.output, readout)?;
    let task_id = tape.mean_nll(logits, &batch.labels)?;
    let root = if include_aux {
        if let (Some(records), Some(gates_id)) = (&fwd.routing, fwd.gates) {
            let cfg = adapter.config();
            let stats = balance_stats(records, cfg.n_experts, cfg.n_shared, false)?;
            let aux = tape.balance_penalty(gates_id, &stats.load, cfg.n_shared)?;
            let scaled = tape.scale(aux, T::from_f64(lambda));
            tape.add(task_id, scaled)?
        } else {
            task_id
        }
    } else {
        task_id
    };
    let mut grads = tape.backward(root)?;
    let mut values = Vec::with_capacity(adapter.n_params());
    for (&id, (_, p)) in binding.ids.iter().zip(adapter.named_params()) {
        values.extend_from_slice(grads.take_or_zeros(id, p.shape()).data());
    }
    Ok(FlatGradient {
        category,
        values,
        batch_size,
        seed,
    })
}

/// `category_gradient_with` against the dataset's own frozen readout.
pub fn category_gradient<T: Scalar>(
    adapter: &AnyAdapter<T>,
    ds: &ConflictDataset<T>,
    category: usize,
    batch_size: usize,
    seed: u64,
) -> Result<FlatGradient<T>> {
    category_gradient_with(adapter, &ds.readout, ds, category, batch_size, seed, false, 0.0)
}

/// Pairwise cosine similarity `g_i . g_j / (|g_i| |g_j|)`, computed in f64.
/// The diagonal is exactly 1; zero-norm gradients yield NaN entries.
pub fn cosine_matrix<T: Scalar>(grads: &[FlatGradient<T>]) -> Result<Vec<Vec<f64>>> {
    let c = grads.len();
    if c == 0 {
        return Err(Error::InvalidConfig("cosine_matrix: no gradients".into()));
    }
    let len = grads[0].values.len();
    if grads.iter().any(|g| g.values.len() != len) {
        return Err(Error::ShapeMismatch {
            op: "cosine_matrix",
            expected: vec![len],
            got: vec![grads.iter().map(|g| g.values.len()).max().unwrap()],
        });
    }
    let norms: Vec<f64> = grads
        .iter()
        .map(|g| {
            g.values
                .iter()
                .map(|&v| {
                    let v = v.to_f64();
                    v * v
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let mut out = vec![vec![0.0; c]; c];
    for i in 0..c {
        for j in 0..c {
            out[i][j] = if i == j {
                1.0
            } else if norms[i] == 0.0 || norms[j] == 0.0 {
                f64::NAN
            } else {
                let dot: f64 = grads[i]
                    .values
                    .iter()
                    .zip(&grads[j].values)
                    .map(|(&a, &b)| a.to_f64() * b.to_f64())
                    .sum();
                dot / (norms[i] * norms[j])
            };
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisOptions {
    /// Step length of the simulated single-task update, applied to the
    /// unit-normalized task gradient.
    pub probe_step: f64,
    /// Held-out evaluation batches per category.
    pub eval_batches: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Influence cells whose same-task loss change is below this guard are
    /// excluded from the average.
    pub denominator_guard: f64,
    /// Include the balance penalty (at `lambda`) in probe gradients.
    pub include_aux: bool,
    pub lambda: f64,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions {
            probe_step: 1e-3,
            eval_batches: 8,
            batch_size: 64,
            seed: 0,
            denominator_guard: 1e-9,
            include_aux: false,
            lambda: 0.0,
        }
    }
}

/// Task family the influence probe runs over. Implemented by the adapter
/// harness below and by synthetic test functions.
pub trait InfluenceTasks<T: Scalar> {
    fn n_tasks(&self) -> usize;
    fn base_params(&self) -> Vec<T>;
    /// Task gradient at the base parameters.
    fn gradient(&self, task: usize) -> Result<Vec<T>>;
    /// Loss of `task` on held-out batch `batch` at `params`.
    fn loss_at(&self, task: usize, batch: usize, params: &[T]) -> Result<f64>;
}

#[derive(Debug, Clone)]
pub struct InfluenceResult {
    pub values: Vec<Vec<f64>>,
    /// Cells where every evaluation batch fell below the denominator guard.
    pub unreliable: Vec<(usize, usize)>,
}

/// Influence of a simulated task-j update on task i:
/// `I[i][j] = mean_b (L_i(theta) - L_i(theta_j)) / (L_i(theta) - L_i(theta_i))`
/// with `theta_j = theta - probe_step * g_j / |g_j|`. The base parameters are
/// never mutated; each probe runs on its own copy.
pub fn influence_from_tasks<T: Scalar>(
    tasks: &impl InfluenceTasks<T>,
    opts: &AnalysisOptions,
) -> Result<InfluenceResult> {
    if opts.probe_step <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "analysis.probe_step must be positive, got {}",
            opts.probe_step
        )));
    }
    let c = tasks.n_tasks();
    let base = tasks.base_params();

    let mut probes: Vec<Vec<T>> = Vec::with_capacity(c);
    for j in 0..c {
        let g = tasks.gradient(j)?;
        let norm = g.iter().map(|&v| v.to_f64() * v.to_f64()).sum::<f64>().sqrt();
        let mut theta = base.clone();
        if norm > 0.0 {
            let scale = T::from_f64(opts.probe_step / norm);
            for (t, &gv) in theta.iter_mut().zip(&g) {
                *t = *t - scale * gv;
            }
        }
        probes.push(theta);
    }

    // base and probed losses per (task, eval batch)
    let mut base_loss = vec![vec![0.0f64; opts.eval_batches]; c];
    for i in 0..c {
        for b in 0..opts.eval_batches {
            base_loss[i][b] = tasks.loss_at(i, b, &base)?;
        }
    }
    let mut probe_loss = vec![vec![vec![0.0f64; opts.eval_batches]; c]; c];
    for (j, theta) in probes.iter().enumerate() {
        for i in 0..c {
            for b in 0..opts.eval_batches {
                probe_loss[j][i][b] = tasks.loss_at(i, b, theta)?;
            }
        }
    }

    let mut values = vec![vec![0.0f64; c]; c];
    let mut unreliable = Vec::new();
    for i in 0..c {
        for j in 0..c {
            let mut sum = 0.0;
            let mut n = 0usize;
            for b in 0..opts.eval_batches {
                let denom = base_loss[i][b] - probe_loss[i][i][b];
                if denom.abs() < opts.denominator_guard {
                    continue;
                }
                sum += (base_loss[i][b] - probe_loss[j][i][b]) / denom;
                n += 1;
            }
            if n == 0 {
                values[i][j] = f64::NAN;
                unreliable.push((i, j));
            } else {
                values[i][j] = sum / n as f64;
            }
        }
    }
    Ok(InfluenceResult { values, unreliable })
}

/// Adapter-backed influence tasks: category task losses under the dataset's
/// frozen readout, evaluated on held-out per-category batches.
struct AdapterTasks<'a, T: Scalar> {
    adapter: &'a AnyAdapter<T>,
    ds: &'a ConflictDataset<T>,
    opts: AnalysisOptions,
}

impl<'a, T: Scalar> InfluenceTasks<T> for AdapterTasks<'a, T> {
    fn n_tasks(&self) -> usize {
        self.ds.n_categories()
    }

    fn base_params(&self) -> Vec<T> {
        self.adapter.flatten()
    }

    fn gradient(&self, task: usize) -> Result<Vec<T>> {
        let seed = seeds::derive(self.opts.seed, seeds::STREAM_PROBE, task as u64);
        Ok(category_gradient_with(
            self.adapter,
            &self.ds.readout,
            self.ds,
            task,
            self.opts.batch_size,
            seed,
            self.opts.include_aux,
            self.opts.lambda,
        )?
        .values)
    }

    fn loss_at(&self, task: usize, batch: usize, params: &[T]) -> Result<f64> {
        let mut probed = self.adapter.clone();
        probed.set_flat(params)?;
        let seed = seeds::derive(
            self.opts.seed,
            seeds::STREAM_EVAL,
            (task * self.opts.eval_batches + batch) as u64,
        );
        let eval = sample_batch(self.ds, Some(task), self.opts.batch_size, seed)?;
        Ok(batch_task_loss(&probed, &self.ds.readout, &eval)?.to_f64())
    }
}

/// C x C influence matrix for an adapter on the conflict dataset.
pub fn influence_matrix<T: Scalar>(
    adapter: &AnyAdapter<T>,
    ds: &ConflictDataset<T>,
    opts: &AnalysisOptions,
) -> Result<InfluenceResult> {
    let tasks = AdapterTasks {
        adapter,
        ds,
        opts: opts.clone(),
    };
    influence_from_tasks(&tasks, opts)
}

/// Expert activation rates over each category's full sample set: entry
/// `(e, c)` is the fraction of category-c tokens whose selected set contains
/// expert e. Columns sum to `top_k + n_shared`.
pub fn activation_rates<T: Scalar>(
    adapter: &MoEAdapter<T>,
    ds: &ConflictDataset<T>,
) -> Result<Vec<Vec<f64>>> {
    let n_experts = adapter.n_experts();
    let c_count = ds.n_categories();
    let mut rates = vec![vec![0.0f64; c_count]; n_experts];
    for (c, cat) in ds.categories.iter().enumerate() {
        let records = adapter.route(&cat.inputs)?;
        let n = records.len() as f64;
        let mut counts = vec![0usize; n_experts];
        for rec in &records {
            for &e in &rec.selected {
                counts[e] += 1;
            }
        }
        for e in 0..n_experts {
            rates[e][c] = counts[e] as f64 / n;
        }
    }
    Ok(rates)
}

/// Data payload behind the heatmap/matrix figures, serialized as JSON.
/// Non-finite entries (undefined cells) serialize as null.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub mode: String,
    pub categories: Vec<String>,
    pub cosine: Vec<Vec<Option<f64>>>,
    pub influence: Vec<Vec<Option<f64>>>,
    pub influence_unreliable: Vec<(usize, usize)>,
    /// `None` with a note for dense adapters.
    pub activation: Option<Vec<Vec<f64>>>,
    pub activation_note: Option<String>,
    pub params: ParamCounts,
    pub adapter: AdapterConfig,
    pub options: AnalysisOptions,
    pub dataset_sha256: Option<String>,
    pub run_manifest_hash: Option<String>,
}

pub fn finite_or_none(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn optional_matrix(m: &[Vec<f64>]) -> Vec<Vec<Option<f64>>> {
    m.iter()
        .map(|row| row.iter().map(|&v| finite_or_none(v)).collect())
        .collect()
}

/// Full per-checkpoint report: cosine matrix, influence matrix, activation
/// rates (MoE), and parameter accounting.
pub fn analyze_checkpoint<T: Scalar>(
    adapter: &AnyAdapter<T>,
    ds: &ConflictDataset<T>,
    opts: &AnalysisOptions,
    dataset_sha256: Option<String>,
    run_manifest_hash: Option<String>,
) -> Result<AnalysisReport> {
    let c_count = ds.n_categories();
    let mut grads = Vec::with_capacity(c_count);
    for c in 0..c_count {
        let seed = seeds::derive(opts.seed, seeds::STREAM_PROBE, c as u64);
        grads.push(category_gradient_with(
            adapter,
            &ds.readout,
            ds,
            c,
            opts.batch_size,
            seed,
            opts.include_aux,
            opts.lambda,
        )?);
    }
    let cosine = cosine_matrix(&grads)?;
    let influence = influence_matrix(adapter, ds, opts)?;
    let (activation, activation_note) = match adapter {
        AnyAdapter::Moe(m) => (Some(activation_rates(m, ds)?), None),
        AnyAdapter::Dense(_) => (
            None,
            Some("not applicable (dense adapter has no experts)".to_string()),
        ),
    };
    Ok(AnalysisReport {
        mode: "checkpoint".to_string(),
        categories: (0..c_count).map(category_label).collect(),
        cosine: optional_matrix(&cosine),
        influence: optional_matrix(&influence.values),
        influence_unreliable: influence.unreliable,
        activation,
        activation_note,
        params: count_params(adapter.config())?,
        adapter: adapter.config().clone(),
        options: opts.clone(),
        dataset_sha256,
        run_manifest_hash,
    })
}

/// Mean of the off-diagonal cells that are present.
pub fn mean_offdiag(matrix: &[Vec<Option<f64>>]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, row) in matrix.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if i != j {
                if let Some(v) = v {
                    sum += v;
                    n += 1;
                }
            }
        }
    }
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Count of strictly negative off-diagonal cells.
pub fn negative_offdiag_cells(matrix: &[Vec<Option<f64>>]) -> usize {
    let mut n = 0;
    for (i, row) in matrix.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if i != j && matches!(v, Some(x) if *x < 0.0) {
                n += 1;
            }
        }
    }
    n
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareVerdict {
    /// `b - a` per cell, None where either side is undefined.
    pub cosine_delta: Vec<Vec<Option<f64>>>,
    pub influence_delta: Vec<Vec<Option<f64>>>,
    pub mean_offdiag_cosine_a: f64,
    pub mean_offdiag_cosine_b: f64,
    pub cosine_improved: bool,
    pub negative_influence_cells_a: usize,
    pub negative_influence_cells_b: usize,
    pub negative_influence_reduced: bool,
    pub verdict: String,
}

fn delta_matrix(
    a: &[Vec<Option<f64>>],
    b: &[Vec<Option<f64>>],
) -> Vec<Vec<Option<f64>>> {
    a.iter()
        .zip(b)
        .map(|(ra, rb)| {
            ra.iter()
                .zip(rb)
                .map(|(va, vb)| match (va, vb) {
                    (Some(x), Some(y)) => Some(y - x),
                    _ => None,
                })
                .collect()
        })
        .collect()
}

/// Per-pair deltas of the cosine and influence entries of report `b`
/// relative to report `a`, with direction flags.
pub fn compare_runs(a: &AnalysisReport, b: &AnalysisReport) -> Result<CompareVerdict> {
    if a.dataset_sha256 != b.dataset_sha256 {
        return Err(Error::InvalidConfig(format!(
            "compare: dataset manifests differ ({:?} vs {:?})",
            a.dataset_sha256, b.dataset_sha256
        )));
    }
    if a.categories != b.categories {
        return Err(Error::InvalidConfig(
            "compare: category sets differ".to_string(),
        ));
    }
    let cosine_delta = delta_matrix(&a.cosine, &b.cosine);
    let influence_delta = delta_matrix(&a.influence, &b.influence);
    let ca = mean_offdiag(&a.cosine);
    let cb = mean_offdiag(&b.cosine);
    let na = negative_offdiag_cells(&a.influence);
    let nb = negative_offdiag_cells(&b.influence);
    let all_zero = cosine_delta
        .iter()
        .chain(&influence_delta)
        .flatten()
        .all(|v| matches!(v, Some(x) if *x == 0.0));
    let cosine_improved = cb > ca;
    let negative_influence_reduced = nb < na;
    let verdict = if all_zero {
        "no change".to_string()
    } else {
        let mut flags = Vec::new();
        flags.push(if cosine_improved {
            "cosine improved"
        } else if cb < ca {
            "cosine degraded"
        } else {
            "cosine unchanged"
        });
        flags.push(if negative_influence_reduced {
            "negative influence cells reduced"
        } else if nb > na {
            "negative influence cells increased"
        } else {
            "negative influence cells unchanged"
        });
        flags.join("; ")
    };
    Ok(CompareVerdict {
        cosine_delta,
        influence_delta,
        mean_offdiag_cosine_a: ca,
        mean_offdiag_cosine_b: cb,
        cosine_improved,
        negative_influence_cells_a: na,
        negative_influence_cells_b: nb,
        negative_influence_reduced,
        verdict,
    })
}

/// Training observer computing the per-category gradient cosine matrix at a
/// fixed step interval; `mean_cosine` averages the sampled matrices over the
/// trajectory.
pub struct TrajectoryProbe<'a, T: Scalar> {
    ds: &'a ConflictDataset<T>,
    every: usize,
    batch_size: usize,
    seed: u64,
    pub samples: Vec<(usize, Vec<Vec<f64>>)>,
}

impl<'a, T: Scalar> TrajectoryProbe<'a, T> {
    pub fn new(ds: &'a ConflictDataset<T>, every: usize, batch_size: usize, seed: u64) -> Self {
        assert!(every > 0, "probe interval must be positive");
        TrajectoryProbe {
            ds,
            every,
            batch_size,
            seed,
            samples: Vec::new(),
        }
    }

    /// Cellwise mean over the sampled matrices, skipping undefined entries.
    pub fn mean_cosine(&self) -> Vec<Vec<f64>> {
        let c = self.ds.n_categories();
        let mut sums = vec![vec![0.0f64; c]; c];
        let mut counts = vec![vec![0usize; c]; c];
        for (_, m) in &self.samples {
            for i in 0..c {
                for j in 0..c {
                    if m[i][j].is_finite() {
                        sums[i][j] += m[i][j];
                        counts[i][j] += 1;
                    }
                }
            }
        }
        for i in 0..c {
            for j in 0..c {
                sums[i][j] = if counts[i][j] == 0 {
                    f64::NAN
                } else {
                    sums[i][j] / counts[i][j] as f64
                };
            }
        }
        sums
    }
}

impl<'a, T: Scalar> TrainObserver<T> for TrajectoryProbe<'a, T> {
    fn before_update(&mut self, step: usize, adapter: &AnyAdapter<T>) {
        if step % self.every != 0 {
            return;
        }
        let c_count = self.ds.n_categories();
        let mut grads = Vec::with_capacity(c_count);
        for c in 0..c_count {
            let seed = seeds::derive(
                self.seed,
                seeds::STREAM_PROBE,
                (step * c_count + c) as u64,
            );
            match category_gradient(adapter, self.ds, c, self.batch_size, seed) {
                Ok(g) => grads.push(g),
                Err(_) => return,
            }
        }
        if let Ok(m) = cosine_matrix(&grads) {
            self.samples.push((step, m));
        }
    }
}

/// Render a labeled matrix as CSV (row label in the first column).
pub fn matrix_csv(
    row_labels: &[String],
    col_labels: &[String],
    cells: impl Fn(usize, usize) -> Option<f64>,
) -> String {
    let mut out = String::from("row");
    for c in col_labels {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for (i, r) in row_labels.iter().enumerate() {
        out.push_str(r);
        for j in 0..col_labels.len() {
            out.push(',');
            match cells(i, j) {
                Some(v) => out.push_str(&format!("{v}")),
                None => out.push_str("NaN"),
            }
        }
        out.push('\n');
    }
    out
}
