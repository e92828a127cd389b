//! The two adapter architectures under comparison: a monolithic dense FFN
//! and a sparse mixture-of-experts adapter (expert bank, top-k router,
//! output head), with initialization, parameter accounting, and presets.

mod dense;
mod moe;

pub use dense::DenseAdapter;
pub use moe::{route, ExpertFfn, MoEAdapter, MoeHead, RoutingRecord};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{GradTape, NodeId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterKind {
    Dense,
    Moe,
}

/// Output head of the MoE adapter.
///
/// `Projection` is a linear map into the readout space followed by layer
/// norm; `Mlp` is layer norm followed by a SiLU MLP back to the input width.
/// The MLP head is the default: it is the variant whose parameter budget
/// reproduces the ~75% active ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadVariant {
    Projection,
    Mlp,
}

/// Full architectural description of either adapter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub kind: AdapterKind,
    /// Input/hidden width d.
    pub input_dim: usize,
    /// Readout-space width D (projection head only).
    pub output_dim: usize,
    /// Dense adapter intermediate width.
    pub dense_hidden: usize,
    /// Number of experts N.
    pub n_experts: usize,
    /// Experts activated per token k.
    pub top_k: usize,
    /// Expert FFN intermediate width.
    pub expert_hidden: usize,
    pub head: HeadVariant,
    /// MLP head intermediate width.
    pub agg_hidden: usize,
    /// Always-routed expert count (defaults to 0; the always-active head
    /// plays the shared-expert role).
    pub n_shared: usize,
    pub use_bias: bool,
    pub ln_epsilon: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig::preset("moe-8c4").expect("default preset")
    }
}

impl AdapterConfig {
    /// Desk-scale presets mirroring the expert-configuration ablation rows,
    /// plus the budget-matched dense baseline.
    ///
    /// `dense-base` uses `dense_hidden = 260` so that its total parameter
    /// count equals `moe-8c4` exactly (the expert bank, gate, and head of
    /// the default MoE sum to 16 640 non-LN parameters = 2 * 32 * 260).
    pub fn preset(name: &str) -> Result<Self> {
        let desk_moe = |n_experts: usize, top_k: usize, expert_hidden: usize| AdapterConfig {
            kind: AdapterKind::Moe,
            input_dim: 32,
            output_dim: 32,
            dense_hidden: 260,
            n_experts,
            top_k,
            expert_hidden,
            head: HeadVariant::Mlp,
            agg_hidden: 128,
            n_shared: 0,
            use_bias: false,
            ln_epsilon: 1e-5,
        };
        let cfg = match name {
            "dense-base" => AdapterConfig {
                kind: AdapterKind::Dense,
                ..desk_moe(8, 4, 16)
            },
            "moe-8c4" | "8c4" => desk_moe(8, 4, 16),
            "moe-16c4" | "16c4" => desk_moe(16, 4, 16),
            "moe-8c1" | "8c1" => desk_moe(8, 1, 16),
            "moe-4c2" | "4c2" => desk_moe(4, 2, 16),
            "moe-8c4-halfdim" | "8c4-halfdim" => desk_moe(8, 4, 8),
            "moe-8c4-doubledim" | "8c4-doubledim" => desk_moe(8, 4, 32),
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown preset '{other}' (expected dense-base, moe-8c4, moe-16c4, \
                     moe-8c1, moe-4c2, moe-8c4-halfdim, moe-8c4-doubledim)"
                )))
            }
        };
        Ok(cfg)
    }

    /// Production-scale MoE configuration (d = 2560, 8 experts of width 1280,
    /// top-4 routing, MLP head of width 10240).
    pub fn full_scale_moe() -> Self {
        AdapterConfig {
            kind: AdapterKind::Moe,
            input_dim: 2560,
            output_dim: 2560,
            dense_hidden: 20480,
            n_experts: 8,
            top_k: 4,
            expert_hidden: 1280,
            head: HeadVariant::Mlp,
            agg_hidden: 10240,
            n_shared: 0,
            use_bias: false,
            ln_epsilon: 1e-5,
        }
    }

    /// Production-scale dense baseline (d = 2560, intermediate 20480).
    pub fn full_scale_dense() -> Self {
        AdapterConfig {
            kind: AdapterKind::Dense,
            ..Self::full_scale_moe()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidConfig("adapter.input_dim must be positive".into()));
        }
        if !(self.ln_epsilon > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "adapter.ln_epsilon must be positive, got {}",
                self.ln_epsilon
            )));
        }
        match self.kind {
            AdapterKind::Dense => {
                if self.dense_hidden == 0 {
                    return Err(Error::InvalidConfig(
                        "adapter.dense_hidden must be positive".into(),
                    ));
                }
            }
            AdapterKind::Moe => {
                if self.n_experts == 0 || self.expert_hidden == 0 {
                    return Err(Error::InvalidConfig(
                        "adapter.n_experts and adapter.expert_hidden must be positive".into(),
                    ));
                }
                if self.top_k == 0 || self.top_k + self.n_shared > self.n_experts {
                    return Err(Error::InvalidConfig(format!(
                        "adapter.top_k must satisfy 1 <= top_k + n_shared <= n_experts \
                         (top_k={}, n_shared={}, n_experts={})",
                        self.top_k, self.n_shared, self.n_experts
                    )));
                }
                match self.head {
                    HeadVariant::Mlp if self.agg_hidden == 0 => {
                        return Err(Error::InvalidConfig(
                            "adapter.agg_hidden must be positive".into(),
                        ))
                    }
                    HeadVariant::Projection if self.output_dim == 0 => {
                        return Err(Error::InvalidConfig(
                            "adapter.output_dim must be positive".into(),
                        ))
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    /// Width of the adapter output (what the frozen readout consumes).
    pub fn out_width(&self) -> usize {
        match (self.kind, self.head) {
            (AdapterKind::Dense, _) => self.input_dim,
            (AdapterKind::Moe, HeadVariant::Mlp) => self.input_dim,
            (AdapterKind::Moe, HeadVariant::Projection) => self.output_dim,
        }
    }
}

/// Trainable-parameter accounting. `components` lists named element counts;
/// `active` is what a forward pass touches per token (gate, head, shared
/// layer norms, and `top_k + n_shared` experts).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamCounts {
    pub components: Vec<(String, usize)>,
    pub total: usize,
    pub active: usize,
    pub ratio: f64,
}

impl ParamCounts {
    pub fn component(&self, name: &str) -> Option<usize> {
        self.components
            .iter()
            .find(|(n, _)| n == name)
            .map(|&(_, c)| c)
    }
}

pub fn count_params(cfg: &AdapterConfig) -> Result<ParamCounts> {
    cfg.validate()?;
    let d = cfg.input_dim;
    let bias = cfg.use_bias;
    let linear = |out: usize, inp: usize| out * inp + if bias { out } else { 0 };
    let mut components = Vec::new();
    let (total, active);
    match cfg.kind {
        AdapterKind::Dense => {
            components.push(("ln_in".to_string(), 2 * d));
            components.push(("w1".to_string(), linear(cfg.dense_hidden, d)));
            components.push(("w2".to_string(), linear(d, cfg.dense_hidden)));
            components.push(("ln_out".to_string(), 2 * d));
            total = components.iter().map(|&(_, c)| c).sum();
            active = total;
        }
        AdapterKind::Moe => {
            let expert_each = linear(cfg.expert_hidden, d) + linear(d, cfg.expert_hidden);
            let gate = cfg.n_experts * d; // no bias on the gate
            components.push(("ln_in".to_string(), 2 * d));
            components.push(("experts".to_string(), cfg.n_experts * expert_each));
            components.push(("gate".to_string(), gate));
            let head_active;
            match cfg.head {
                HeadVariant::Mlp => {
                    let mlp = linear(cfg.agg_hidden, d) + linear(d, cfg.agg_hidden);
                    components.push(("head_ln".to_string(), 2 * d));
                    components.push(("head_mlp".to_string(), mlp));
                    head_active = 2 * d + mlp;
                }
                HeadVariant::Projection => {
                    let proj = linear(cfg.output_dim, d);
                    components.push(("head_proj".to_string(), proj));
                    components.push(("head_ln".to_string(), 2 * cfg.output_dim));
                    head_active = proj + 2 * cfg.output_dim;
                }
            }
            total = 2 * d
                + cfg.n_experts * expert_each
                + gate
                + head_active;
            active = 2 * d
                + (cfg.top_k + cfg.n_shared) * expert_each
                + gate
                + head_active;
        }
    }
    debug_assert_eq!(total, components.iter().map(|&(_, c)| c).sum::<usize>());
    Ok(ParamCounts {
        components,
        total,
        active,
        ratio: active as f64 / total as f64,
    })
}

/// Tape leaves for an adapter's parameters, in canonical order.
pub struct TapeBinding {
    pub ids: Vec<NodeId>,
}

/// Cursor handing out binding slots in canonical parameter order.
pub(crate) struct Slots<'a> {
    ids: &'a [NodeId],
    pos: usize,
}

impl<'a> Slots<'a> {
    fn new(ids: &'a [NodeId]) -> Self {
        Slots { ids, pos: 0 }
    }

    pub(crate) fn next(&mut self) -> NodeId {
        let id = self.ids[self.pos];
        self.pos += 1;
        id
    }

    fn finish(self) {
        debug_assert_eq!(self.pos, self.ids.len(), "binding slots not fully consumed");
    }
}

/// Result of one adapter forward pass on a tape.
pub struct ForwardResult<T> {
    pub output: NodeId,
    /// Per token routing decisions (MoE only).
    pub routing: Option<Vec<RoutingRecord<T>>>,
    /// Post-top-k gate matrix node `[batch x n_experts]` (MoE only).
    pub gates: Option<NodeId>,
    /// Raw router logits node `[batch x n_experts]` (MoE only).
    pub gate_logits: Option<NodeId>,
}

/// Either adapter behind one surface.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyAdapter<T> {
    Dense(DenseAdapter<T>),
    Moe(MoEAdapter<T>),
}

/// Scaled-uniform weight draw: `U(-bound, bound)` elementwise, sampled in
/// f64 and cast, so the draw stream is identical across scalar types.
fn uniform_tensor<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    let numel: usize = shape.iter().product();
    let data: Vec<T> = (0..numel)
        .map(|_| T::from_f64((rng.random::<f64>() * 2.0 - 1.0) * bound))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("uniform_tensor shape")
}

/// Kaiming-style fan-in bound.
fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

pub(crate) fn init_linear<T: Scalar>(
    rng: &mut ChaCha8Rng,
    out_dim: usize,
    in_dim: usize,
    use_bias: bool,
    bound: f64,
) -> crate::kernels::LinearParams<T> {
    let weight = uniform_tensor(rng, &[out_dim, in_dim], bound);
    let bias = use_bias.then(|| Tensor::zeros(&[out_dim]));
    crate::kernels::LinearParams { weight, bias }
}

impl<T: Scalar> AnyAdapter<T> {
    /// Seed-deterministic initialization: weights are scaled-uniform with
    /// fan-in bounds, layer norms are identity, the gate is near-zero
    /// (scale 0.01) so early routing is near-uniform.
    pub fn init(cfg: &AdapterConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(match cfg.kind {
            AdapterKind::Dense => AnyAdapter::Dense(DenseAdapter::init(cfg, &mut rng)),
            AdapterKind::Moe => AnyAdapter::Moe(MoEAdapter::init(cfg, &mut rng)),
        })
    }

    pub fn config(&self) -> &AdapterConfig {
        match self {
            AnyAdapter::Dense(a) => &a.config,
            AnyAdapter::Moe(a) => &a.config,
        }
    }

    pub fn kind(&self) -> AdapterKind {
        self.config().kind
    }

    /// Parameters in canonical order. The order is the contract for flat
    /// gradients, optimizer state, and checkpoint tensor layout.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        match self {
            AnyAdapter::Dense(a) => a.named_params(),
            AnyAdapter::Moe(a) => a.named_params(),
        }
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        match self {
            AnyAdapter::Dense(a) => a.named_params_mut(),
            AnyAdapter::Moe(a) => a.named_params_mut(),
        }
    }

    /// Weight-decay eligibility per parameter (weight matrices only; layer
    /// norm and bias parameters are exempt).
    pub fn decay_mask(&self) -> Vec<bool> {
        self.named_params()
            .iter()
            .map(|(_, t)| t.rank() == 2)
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Concatenate all parameters into one flat vector (canonical order).
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.n_params());
        for (_, t) in self.named_params() {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[T]) -> Result<()> {
        let total = self.n_params();
        if flat.len() != total {
            return Err(Error::ShapeMismatch {
                op: "adapter::set_flat",
                expected: vec![total],
                got: vec![flat.len()],
            });
        }
        let mut pos = 0;
        for (_, t) in self.named_params_mut() {
            let n = t.numel();
            for (dst, &src) in t.data_mut().iter_mut().zip(&flat[pos..pos + n]) {
                *dst = src;
            }
            pos += n;
        }
        Ok(())
    }

    /// Register every parameter as a tape leaf, in canonical order.
    pub fn bind(&self, tape: &mut GradTape<T>) -> TapeBinding {
        let ids = self
            .named_params()
            .into_iter()
            .map(|(_, t)| tape.leaf(t.clone()))
            .collect();
        TapeBinding { ids }
    }

    /// Forward pass on the tape. `x` is a `[batch x d]` leaf or node.
    pub fn forward_tape(
        &self,
        tape: &mut GradTape<T>,
        binding: &TapeBinding,
        x: NodeId,
    ) -> Result<ForwardResult<T>> {
        let mut slots = Slots::new(&binding.ids);
        let result = match self {
            AnyAdapter::Dense(a) => {
                let output = a.forward_tape(tape, &mut slots, x)?;
                ForwardResult {
                    output,
                    routing: None,
                    gates: None,
                    gate_logits: None,
                }
            }
            AnyAdapter::Moe(a) => a.forward_tape(tape, &mut slots, x)?,
        };
        slots.finish();
        Ok(result)
    }

    /// Plain forward: runs the tape path on a scratch tape and returns the
    /// output value plus routing records (MoE).
    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Option<Vec<RoutingRecord<T>>>)> {
        let mut tape = GradTape::new();
        let x_id = tape.leaf(x.clone());
        let binding = self.bind(&mut tape);
        let result = self.forward_tape(&mut tape, &binding, x_id)?;
        Ok((tape.value(result.output).clone(), result.routing))
    }
}
