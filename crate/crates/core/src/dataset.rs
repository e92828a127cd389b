//! Synthetic heterogeneous-data generator: C categories with distinct input
//! statistics and deliberately conflicting target maps, plus the frozen
//! random readout that stands in for the downstream model.
//!
//! Category 0 and 1 ("speech" and "music") carry opposed linear target maps
//! on the first half of the feature coordinates; category 2 ("sound") is the
//! bridge, built from their average plus an independent component. Labels
//! come from the argmax of a frozen per-category map, so the signal is
//! learnable and noise-free. Category means are projected onto the null
//! space of their own target map: routing sees distinct means while the
//! label distribution stays non-degenerate. Everything is a pure function of
//! (config, seed).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adapter::AnyAdapter;
use crate::error::{Error, Result};
use crate::kernels::{self, LinearParams};
use crate::objectives;
use crate::scalar::Scalar;
use crate::seeds;
use crate::tensor::Tensor;

/// Scale of the category mean offsets relative to the unit per-coordinate
/// noise; controls how much the category manifolds overlap.
const MEAN_SCALE: f64 = 0.8;
/// Attempts at redrawing construction constants before giving up on a
/// non-degenerate label distribution.
const MAX_ATTEMPTS: u64 = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictDatasetConfig {
    /// Category count C (first three are speech, music, sound).
    pub n_categories: usize,
    /// Feature dimension d.
    pub feature_dim: usize,
    /// Class count V.
    pub n_classes: usize,
    /// Samples per category.
    pub n_per_category: usize,
    /// Conflict strength in [0, 1]: 0 = one shared target map, 1 = fully
    /// opposed per-category maps.
    pub conflict_alpha: f64,
    /// Width of the frozen readout input (the adapter output width).
    pub readout_dim: usize,
    pub seed: u64,
}

impl Default for ConflictDatasetConfig {
    fn default() -> Self {
        ConflictDatasetConfig {
            n_categories: 3,
            feature_dim: 32,
            n_classes: 8,
            n_per_category: 2000,
            conflict_alpha: 1.0,
            readout_dim: 32,
            seed: 0,
        }
    }
}

impl ConflictDatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_categories < 2 {
            return Err(Error::InvalidConfig(format!(
                "data.n_categories must be at least 2, got {}",
                self.n_categories
            )));
        }
        if self.feature_dim < 2 {
            return Err(Error::InvalidConfig(format!(
                "data.feature_dim must be at least 2, got {}",
                self.feature_dim
            )));
        }
        if self.n_classes < 2 {
            return Err(Error::InvalidConfig(format!(
                "data.n_classes must be at least 2, got {}",
                self.n_classes
            )));
        }
        if self.n_per_category == 0 {
            return Err(Error::InvalidConfig(
                "data.n_per_category must be at least 1".to_string(),
            ));
        }
        if !(0.0..=1.0).contains(&self.conflict_alpha) {
            return Err(Error::InvalidConfig(format!(
                "data.conflict_alpha must be in [0, 1], got {}",
                self.conflict_alpha
            )));
        }
        if self.readout_dim == 0 {
            return Err(Error::InvalidConfig(
                "data.readout_dim must be positive".to_string(),
            ));
        }
        Ok(())
    }
}

/// Frozen per-category generative pieces plus the drawn samples.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryData<T> {
    /// Input mean, length d.
    pub mean: Tensor<T>,
    /// Low-rank covariance factor, d x r.
    pub factor: Tensor<T>,
    /// Frozen labeling map, V x d.
    pub target_map: Tensor<T>,
    /// Drawn inputs, n x d.
    pub inputs: Tensor<T>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConflictDataset<T> {
    pub config: ConflictDatasetConfig,
    pub categories: Vec<CategoryData<T>>,
    /// Frozen shared readout, V x readout_dim. Never receives gradient.
    pub readout: Tensor<T>,
    /// Which redraw attempt produced a non-degenerate label distribution.
    pub attempt: u64,
}

/// Uniformly sampled batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub inputs: Tensor<T>,
    pub labels: Vec<usize>,
    pub categories: Vec<usize>,
}

pub fn category_label(c: usize) -> String {
    match c {
        0 => "speech".to_string(),
        1 => "music".to_string(),
        2 => "sound".to_string(),
        other => format!("cat{other}"),
    }
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Vec<f64> {
    (0..rows * cols)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
        .collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Solve `A y = b` for symmetric positive-definite `A` (row-major n x n)
/// via Cholesky. `None` when the factorization breaks down.
fn solve_spd(a: &[f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = a.to_vec();
    for i in 0..n {
        for j in 0..=i {
            let mut sum = l[i * n + j];
            for k in 0..j {
                sum -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if sum <= 0.0 {
                    return None;
                }
                l[i * n + i] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    let mut z = vec![0.0; n];
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[i * n + k] * z[k];
        }
        z[i] = sum / l[i * n + i];
    }
    let mut y = vec![0.0; n];
    for i in (0..n).rev() {
        let mut sum = z[i];
        for k in i + 1..n {
            sum -= l[k * n + i] * y[k];
        }
        y[i] = sum / l[i * n + i];
    }
    Some(y)
}

/// Remove from `mean` its component visible to `map` (V x d), i.e. project
/// onto the null space of the map so `map . mean = 0`.
fn project_to_null_space(mean: &mut [f64], map: &[f64], v: usize, d: usize) {
    let mut visible = vec![0.0; v];
    for row in 0..v {
        for j in 0..d {
            visible[row] += map[row * d + j] * mean[j];
        }
    }
    let mut gram = vec![0.0; v * v];
    for r in 0..v {
        for c in 0..v {
            let mut acc = 0.0;
            for j in 0..d {
                acc += map[r * d + j] * map[c * d + j];
            }
            gram[r * v + c] = acc;
        }
    }
    // if the gram matrix is singular (e.g. V > d) keep the raw mean
    if let Some(y) = solve_spd(&gram, &visible, v) {
        for j in 0..d {
            for (row, yv) in y.iter().enumerate() {
                mean[j] -= map[row * d + j] * yv;
            }
        }
    }
}

/// One full draw of construction constants and samples, in f64.
fn build_attempt(cfg: &ConflictDatasetConfig, attempt: u64) -> (Vec<CategoryData<f64>>, Tensor<f64>) {
    let mut rng =
        ChaCha8Rng::seed_from_u64(seeds::derive(cfg.seed, seeds::STREAM_DATA, attempt));
    let d = cfg.feature_dim;
    let v = cfg.n_classes;
    let c_count = cfg.n_categories;
    let rank = (d / 4).max(1);
    let map_scale = 1.0 / (d as f64).sqrt();

    let means: Vec<Vec<f64>> = (0..c_count)
        .map(|_| normal_matrix(&mut rng, 1, d, MEAN_SCALE))
        .collect();
    let factors: Vec<Vec<f64>> = (0..c_count)
        .map(|_| normal_matrix(&mut rng, d, rank, 1.0 / (rank as f64).sqrt()))
        .collect();

    let shared = normal_matrix(&mut rng, v, d, map_scale);

    // Opposed maps: speech and music negate each other on the first d/2
    // coordinates; sound is their average plus an independent component.
    let half = d / 2;
    let block_a = normal_matrix(&mut rng, v, half, map_scale);
    let tail_speech = normal_matrix(&mut rng, v, d - half, map_scale);
    let tail_music = normal_matrix(&mut rng, v, d - half, map_scale);
    let bridge_extra = normal_matrix(&mut rng, v, d, map_scale);
    let mut opposed: Vec<Vec<f64>> = Vec::with_capacity(c_count);
    for c in 0..c_count {
        let q = match c {
            0 | 1 => {
                let sign = if c == 0 { 1.0 } else { -1.0 };
                let tail = if c == 0 { &tail_speech } else { &tail_music };
                let mut q = vec![0.0; v * d];
                for row in 0..v {
                    for j in 0..half {
                        q[row * d + j] = sign * block_a[row * half + j];
                    }
                    for j in half..d {
                        q[row * d + j] = tail[row * (d - half) + (j - half)];
                    }
                }
                q
            }
            2 => {
                // average of the opposed pair (zero on the first half) plus
                // an independent component
                let mut q = vec![0.0; v * d];
                for row in 0..v {
                    for j in half..d {
                        q[row * d + j] = 0.5
                            * (tail_speech[row * (d - half) + (j - half)]
                                + tail_music[row * (d - half) + (j - half)]);
                    }
                    for j in 0..d {
                        q[row * d + j] += bridge_extra[row * d + j];
                    }
                }
                q
            }
            _ => normal_matrix(&mut rng, v, d, map_scale),
        };
        opposed.push(q);
    }

    let readout = normal_matrix(
        &mut rng,
        v,
        cfg.readout_dim,
        1.0 / (cfg.readout_dim as f64).sqrt(),
    );

    let alpha = cfg.conflict_alpha;
    let mut categories = Vec::with_capacity(c_count);
    for c in 0..c_count {
        let map: Vec<f64> = shared
            .iter()
            .zip(&opposed[c])
            .map(|(&m, &q)| (1.0 - alpha) * m + alpha * q)
            .collect();
        let mut mean = means[c].clone();
        project_to_null_space(&mut mean, &map, v, d);
        let target_map = Tensor::new(vec![v, d], map).expect("map shape");
        let map_params = LinearParams {
            weight: target_map.clone(),
            bias: None,
        };
        let mut inputs = vec![0.0; cfg.n_per_category * d];
        let mut labels = Vec::with_capacity(cfg.n_per_category);
        for i in 0..cfg.n_per_category {
            let z = normal_matrix(&mut rng, 1, rank, 1.0);
            let row = &mut inputs[i * d..(i + 1) * d];
            for j in 0..d {
                let mut acc = mean[j];
                for (l, &zv) in z.iter().enumerate() {
                    acc += factors[c][j * rank + l] * zv;
                }
                row[j] = acc;
            }
            let x = Tensor::new(vec![d], row.to_vec()).expect("sample shape");
            let logits = kernels::linear(&x, &map_params).expect("label logits");
            labels.push(argmax(logits.data()));
        }
        categories.push(CategoryData {
            mean: Tensor::new(vec![d], mean).expect("mean shape"),
            factor: Tensor::new(vec![d, rank], factors[c].clone()).expect("factor shape"),
            target_map,
            inputs: Tensor::new(vec![cfg.n_per_category, d], inputs).expect("inputs shape"),
            labels,
        });
    }
    let readout = Tensor::new(vec![v, cfg.readout_dim], readout).expect("readout shape");
    (categories, readout)
}

/// Every class frequency must land in `[max(0.02, 0.2/V), 0.6]` per category.
fn labels_non_degenerate(labels: &[usize], n_classes: usize) -> bool {
    let mut counts = vec![0usize; n_classes];
    for &l in labels {
        counts[l] += 1;
    }
    let n = labels.len() as f64;
    let lo = (0.2 / n_classes as f64).max(0.02);
    counts.iter().all(|&c| {
        let f = c as f64 / n;
        f >= lo && f <= 0.6
    })
}

/// Generate the dataset, redrawing construction constants (deterministically)
/// until every category has a non-degenerate label distribution.
pub fn make_dataset<T: Scalar>(cfg: &ConflictDatasetConfig) -> Result<ConflictDataset<T>> {
    cfg.validate()?;
    for attempt in 0..MAX_ATTEMPTS {
        let (categories, readout) = build_attempt(cfg, attempt);
        if categories
            .iter()
            .all(|cat| labels_non_degenerate(&cat.labels, cfg.n_classes))
        {
            return Ok(ConflictDataset {
                config: cfg.clone(),
                categories: categories
                    .into_iter()
                    .map(|c| CategoryData {
                        mean: c.mean.cast(),
                        factor: c.factor.cast(),
                        target_map: c.target_map.cast(),
                        inputs: c.inputs.cast(),
                        labels: c.labels,
                    })
                    .collect(),
                readout: readout.cast(),
                attempt,
            });
        }
    }
    Err(Error::InvalidConfig(format!(
        "make_dataset: no non-degenerate label distribution within {MAX_ATTEMPTS} attempts \
         (seed {})",
        cfg.seed
    )))
}

impl<T: Scalar> ConflictDataset<T> {
    pub fn n_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn total_samples(&self) -> usize {
        self.categories.len() * self.config.n_per_category
    }

    /// Per-category class histograms.
    pub fn label_histogram(&self) -> Vec<Vec<usize>> {
        self.categories
            .iter()
            .map(|c| {
                let mut counts = vec![0usize; self.config.n_classes];
                for &l in &c.labels {
                    counts[l] += 1;
                }
                counts
            })
            .collect()
    }
}

/// Uniform draw with replacement from one category's samples (or from all
/// categories when `category` is `None`). Deterministic in `seed`.
pub fn sample_batch<T: Scalar>(
    ds: &ConflictDataset<T>,
    category: Option<usize>,
    n: usize,
    seed: u64,
) -> Result<Batch<T>> {
    if n == 0 {
        return Err(Error::InvalidConfig(
            "sample_batch: n must be at least 1".to_string(),
        ));
    }
    if let Some(c) = category {
        if c >= ds.n_categories() {
            return Err(Error::UnknownCategory {
                category: c,
                n_categories: ds.n_categories(),
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = ds.config.feature_dim;
    let per_cat = ds.config.n_per_category;
    let mut inputs = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    let mut categories = Vec::with_capacity(n);
    for _ in 0..n {
        let (c, i) = match category {
            Some(c) => (c, rng.random_range(0..per_cat)),
            None => {
                let flat = rng.random_range(0..ds.total_samples());
                (flat / per_cat, flat % per_cat)
            }
        };
        let cat = &ds.categories[c];
        inputs.extend_from_slice(cat.inputs.row(i));
        labels.push(cat.labels[i]);
        categories.push(c);
    }
    Ok(Batch {
        inputs: Tensor::new(vec![n, d], inputs)?,
        labels,
        categories,
    })
}

/// Write the dataset as a container file so analyses are replayable.
pub fn save_dataset<T: Scalar>(ds: &ConflictDataset<T>, path: &std::path::Path) -> Result<()> {
    let labels: Vec<&[usize]> = ds.categories.iter().map(|c| c.labels.as_slice()).collect();
    let names: Vec<String> = (0..ds.n_categories()).map(category_label).collect();
    let meta = serde_json::json!({
        "config": ds.config,
        "attempt": ds.attempt,
        "labels": labels,
        "category_names": names,
    });
    let mut c = crate::checkpoint::Container::new("dataset", meta);
    for (i, cat) in ds.categories.iter().enumerate() {
        c.push_tensor(&format!("cat{i}.mean"), &cat.mean);
        c.push_tensor(&format!("cat{i}.factor"), &cat.factor);
        c.push_tensor(&format!("cat{i}.target_map"), &cat.target_map);
        c.push_tensor(&format!("cat{i}.inputs"), &cat.inputs);
    }
    c.push_tensor("readout", &ds.readout);
    c.write(path)
}

pub fn load_dataset<T: Scalar>(path: &std::path::Path) -> Result<ConflictDataset<T>> {
    let c = crate::checkpoint::Container::read(path)?;
    if c.kind != "dataset" {
        return Err(Error::FormatError(format!(
            "expected a dataset container, got kind '{}'",
            c.kind
        )));
    }
    let config: ConflictDatasetConfig = serde_json::from_value(
        c.meta
            .get("config")
            .cloned()
            .ok_or_else(|| Error::FormatError("dataset meta missing config".into()))?,
    )?;
    let attempt: u64 = serde_json::from_value(
        c.meta
            .get("attempt")
            .cloned()
            .ok_or_else(|| Error::FormatError("dataset meta missing attempt".into()))?,
    )?;
    let labels: Vec<Vec<usize>> = serde_json::from_value(
        c.meta
            .get("labels")
            .cloned()
            .ok_or_else(|| Error::FormatError("dataset meta missing labels".into()))?,
    )?;
    if labels.len() != config.n_categories {
        return Err(Error::FormatError("label table does not match config".into()));
    }
    let mut categories = Vec::with_capacity(config.n_categories);
    for (i, cat_labels) in labels.into_iter().enumerate() {
        if cat_labels.len() != config.n_per_category
            || cat_labels.iter().any(|&l| l >= config.n_classes)
        {
            return Err(Error::FormatError(format!(
                "labels for category {i} do not match config"
            )));
        }
        categories.push(CategoryData {
            mean: c.get_tensor(&format!("cat{i}.mean"))?,
            factor: c.get_tensor(&format!("cat{i}.factor"))?,
            target_map: c.get_tensor(&format!("cat{i}.target_map"))?,
            inputs: c.get_tensor(&format!("cat{i}.inputs"))?,
            labels: cat_labels,
        });
    }
    Ok(ConflictDataset {
        config,
        categories,
        readout: c.get_tensor("readout")?,
        attempt,
    })
}

/// Logits of the frozen readout applied to the adapter output:
/// `R . adapter(x)`. The readout is frozen; gradients stop at the adapter.
pub fn model_logits<T: Scalar>(
    adapter: &AnyAdapter<T>,
    readout: &Tensor<T>,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (out, _) = adapter.forward(x)?;
    let frozen = LinearParams {
        weight: readout.clone(),
        bias: None,
    };
    kernels::linear(&out, &frozen)
}

/// Mean task loss of a batch under the frozen readout.
pub fn batch_task_loss<T: Scalar>(
    adapter: &AnyAdapter<T>,
    readout: &Tensor<T>,
    batch: &Batch<T>,
) -> Result<T> {
    let logits = model_logits(adapter, readout, &batch.inputs)?;
    objectives::task_loss(&logits, &batch.labels)
}
