//! Sparse mixture-of-experts adapter: a bank of expert FFNs behind a learned
//! top-k router, with weighted aggregation and an output head.
//!
//! The router consumes the raw (un-normalized) input; the experts share one
//! pre-expert layer norm. Only the routed experts are evaluated per token.

use rand_chacha::ChaCha8Rng;

use super::{fan_in_bound, init_linear, AdapterConfig, ForwardResult, HeadVariant, Slots};
use crate::error::{Error, Result};
use crate::kernels::{self, LayerNormParams, LinearParams};
use crate::scalar::Scalar;
use crate::tape::{GradTape, NodeId};
use crate::tensor::Tensor;

/// Expert FFN weights; the pre-expert layer norm is shared and lives on the
/// adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertFfn<T> {
    pub w1: LinearParams<T>,
    pub w2: LinearParams<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MoeHead<T> {
    /// Linear map into the readout space, then layer norm.
    Projection {
        proj: LinearParams<T>,
        ln: LayerNormParams<T>,
    },
    /// Layer norm, then SiLU MLP back to the input width.
    Mlp {
        ln: LayerNormParams<T>,
        w1: LinearParams<T>,
        w2: LinearParams<T>,
    },
}

/// Per-token router output.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingRecord<T> {
    /// Raw gate logits, length `n_experts`.
    pub logits: Vec<T>,
    /// Selected expert indices, ascending, length `top_k + n_shared`.
    pub selected: Vec<usize>,
    /// Post-top-k gate values, length `n_experts`, exactly zero off-support.
    pub gates: Vec<T>,
}

/// Selected expert set for one token: the always-routed shared prefix plus
/// the top-k of the routable tail. Ties break toward the lower index.
fn select_experts<T: Scalar>(logits: &[T], top_k: usize, n_shared: usize) -> Vec<usize> {
    let mut selected: Vec<usize> = (0..n_shared).collect();
    let routable = kernels::topk_indices(&logits[n_shared..], top_k);
    selected.extend(routable.into_iter().map(|i| i + n_shared));
    selected
}

/// Route a `[batch x d]` input through a gate: logits `s = x W_g^T`, gates
/// `softmax(topk_mask(s))`, exact zeros off the selected set.
pub fn route<T: Scalar>(
    gate: &LinearParams<T>,
    x: &Tensor<T>,
    top_k: usize,
    n_shared: usize,
) -> Result<Vec<RoutingRecord<T>>> {
    let n_experts = gate.out_dim();
    if top_k == 0 || top_k + n_shared > n_experts {
        return Err(Error::InvalidConfig(format!(
            "route: top_k + n_shared must be in [1, {n_experts}], got {top_k} + {n_shared}"
        )));
    }
    let logits = kernels::linear(x, gate)?;
    let mut records = Vec::with_capacity(logits.n_rows());
    for r in 0..logits.n_rows() {
        let row = logits.row(r);
        let selected = select_experts(row, top_k, n_shared);
        let mut masked = vec![T::neg_infinity(); n_experts];
        for &e in &selected {
            masked[e] = row[e];
        }
        let gates = kernels::softmax(&Tensor::from_vec(masked))?;
        records.push(RoutingRecord {
            logits: row.to_vec(),
            selected,
            gates: gates.into_data(),
        });
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoEAdapter<T> {
    pub config: AdapterConfig,
    pub ln_in: LayerNormParams<T>,
    pub experts: Vec<ExpertFfn<T>>,
    /// Gate d -> n_experts, never biased.
    pub gate: LinearParams<T>,
    pub head: MoeHead<T>,
}

impl<T: Scalar> MoEAdapter<T> {
    pub(super) fn init(cfg: &AdapterConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.input_dim;
        let eps = T::from_f64(cfg.ln_epsilon);
        let experts = (0..cfg.n_experts)
            .map(|_| ExpertFfn {
                w1: init_linear(rng, cfg.expert_hidden, d, cfg.use_bias, fan_in_bound(d)),
                w2: init_linear(rng, d, cfg.expert_hidden, cfg.use_bias, fan_in_bound(cfg.expert_hidden)),
            })
            .collect();
        let gate = init_linear(rng, cfg.n_experts, d, false, 0.01);
        let head = match cfg.head {
            HeadVariant::Projection => MoeHead::Projection {
                proj: init_linear(rng, cfg.output_dim, d, cfg.use_bias, fan_in_bound(d)),
                ln: LayerNormParams::identity(cfg.output_dim, eps),
            },
            HeadVariant::Mlp => MoeHead::Mlp {
                ln: LayerNormParams::identity(d, eps),
                w1: init_linear(rng, cfg.agg_hidden, d, cfg.use_bias, fan_in_bound(d)),
                w2: init_linear(rng, d, cfg.agg_hidden, cfg.use_bias, fan_in_bound(cfg.agg_hidden)),
            },
        };
        MoEAdapter {
            config: cfg.clone(),
            ln_in: LayerNormParams::identity(d, eps),
            experts,
            gate,
            head,
        }
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    /// Single-expert forward `W2 silu(W1 LN(x))` for expert `i`.
    pub fn expert_forward(&self, i: usize, x: &Tensor<T>) -> Result<Tensor<T>> {
        let e = self.experts.get(i).ok_or(Error::InvalidConfig(format!(
            "expert index {i} out of range (n_experts={})",
            self.experts.len()
        )))?;
        let h = kernels::layer_norm(x, &self.ln_in)?;
        let h = kernels::linear(&h, &e.w1)?;
        let h = kernels::silu(&h)?;
        kernels::linear(&h, &e.w2)
    }

    /// Route a batch with this adapter's gate.
    pub fn route(&self, x: &Tensor<T>) -> Result<Vec<RoutingRecord<T>>> {
        route(&self.gate, x, self.config.top_k, self.config.n_shared)
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("ln_in.gamma".to_string(), &self.ln_in.gamma),
            ("ln_in.beta".to_string(), &self.ln_in.beta),
        ];
        for (i, e) in self.experts.iter().enumerate() {
            out.push((format!("experts.{i}.w1.weight"), &e.w1.weight));
            if let Some(b) = &e.w1.bias {
                out.push((format!("experts.{i}.w1.bias"), b));
            }
            out.push((format!("experts.{i}.w2.weight"), &e.w2.weight));
            if let Some(b) = &e.w2.bias {
                out.push((format!("experts.{i}.w2.bias"), b));
            }
        }
        out.push(("gate.weight".to_string(), &self.gate.weight));
        match &self.head {
            MoeHead::Projection { proj, ln } => {
                out.push(("head.proj.weight".to_string(), &proj.weight));
                if let Some(b) = &proj.bias {
                    out.push(("head.proj.bias".to_string(), b));
                }
                out.push(("head.ln.gamma".to_string(), &ln.gamma));
                out.push(("head.ln.beta".to_string(), &ln.beta));
            }
            MoeHead::Mlp { ln, w1, w2 } => {
                out.push(("head.ln.gamma".to_string(), &ln.gamma));
                out.push(("head.ln.beta".to_string(), &ln.beta));
                out.push(("head.w1.weight".to_string(), &w1.weight));
                if let Some(b) = &w1.bias {
                    out.push(("head.w1.bias".to_string(), b));
                }
                out.push(("head.w2.weight".to_string(), &w2.weight));
                if let Some(b) = &w2.bias {
                    out.push(("head.w2.bias".to_string(), b));
                }
            }
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![
            ("ln_in.gamma".to_string(), &mut self.ln_in.gamma),
            ("ln_in.beta".to_string(), &mut self.ln_in.beta),
        ];
        for (i, e) in self.experts.iter_mut().enumerate() {
            out.push((format!("experts.{i}.w1.weight"), &mut e.w1.weight));
            if let Some(b) = &mut e.w1.bias {
                out.push((format!("experts.{i}.w1.bias"), b));
            }
            out.push((format!("experts.{i}.w2.weight"), &mut e.w2.weight));
            if let Some(b) = &mut e.w2.bias {
                out.push((format!("experts.{i}.w2.bias"), b));
            }
        }
        out.push(("gate.weight".to_string(), &mut self.gate.weight));
        match &mut self.head {
            MoeHead::Projection { proj, ln } => {
                out.push(("head.proj.weight".to_string(), &mut proj.weight));
                if let Some(b) = &mut proj.bias {
                    out.push(("head.proj.bias".to_string(), b));
                }
                out.push(("head.ln.gamma".to_string(), &mut ln.gamma));
                out.push(("head.ln.beta".to_string(), &mut ln.beta));
            }
            MoeHead::Mlp { ln, w1, w2 } => {
                out.push(("head.ln.gamma".to_string(), &mut ln.gamma));
                out.push(("head.ln.beta".to_string(), &mut ln.beta));
                out.push(("head.w1.weight".to_string(), &mut w1.weight));
                if let Some(b) = &mut w1.bias {
                    out.push(("head.w1.bias".to_string(), b));
                }
                out.push(("head.w2.weight".to_string(), &mut w2.weight));
                if let Some(b) = &mut w2.bias {
                    out.push(("head.w2.bias".to_string(), b));
                }
            }
        }
        out
    }

    /// Slot consumption must mirror `named_params` exactly.
    pub(super) fn forward_tape(
        &self,
        tape: &mut GradTape<T>,
        slots: &mut Slots<'_>,
        x: NodeId,
    ) -> Result<ForwardResult<T>> {
        let cfg = &self.config;
        let batch = tape.value(x).n_rows();
        let n_experts = cfg.n_experts;
        let eps = self.ln_in.epsilon;

        let (ln_g, ln_b) = (slots.next(), slots.next());
        struct ExpertSlots {
            w1: NodeId,
            b1: Option<NodeId>,
            w2: NodeId,
            b2: Option<NodeId>,
        }
        let expert_slots: Vec<ExpertSlots> = self
            .experts
            .iter()
            .map(|e| ExpertSlots {
                w1: slots.next(),
                b1: e.w1.bias.as_ref().map(|_| slots.next()),
                w2: slots.next(),
                b2: e.w2.bias.as_ref().map(|_| slots.next()),
            })
            .collect();
        let gate_w = slots.next();

        // Router on the raw input; selection is read off the logit values.
        let logits_id = tape.linear(x, gate_w, None)?;
        let logits = tape.value(logits_id).clone();
        let mut support = vec![false; batch * n_experts];
        let mut selected_per_token: Vec<Vec<usize>> = Vec::with_capacity(batch);
        for b in 0..batch {
            let sel = select_experts(logits.row(b), cfg.top_k, cfg.n_shared);
            for &e in &sel {
                support[b * n_experts + e] = true;
            }
            selected_per_token.push(sel);
        }
        let masked_id = tape.mask_support(logits_id, &support)?;
        let gates_id = tape.softmax(masked_id)?;
        let gates = tape.value(gates_id).clone();

        let records: Vec<RoutingRecord<T>> = (0..batch)
            .map(|b| RoutingRecord {
                logits: logits.row(b).to_vec(),
                selected: selected_per_token[b].clone(),
                gates: gates.row(b).to_vec(),
            })
            .collect();

        // Shared pre-expert norm, then sparse dispatch: only experts that
        // received at least one token are evaluated.
        let ln_x = tape.layer_norm(x, ln_g, ln_b, eps)?;
        let mut combined: Option<NodeId> = None;
        for e in 0..n_experts {
            let tokens: Vec<usize> = (0..batch)
                .filter(|&b| support[b * n_experts + e])
                .collect();
            if tokens.is_empty() {
                continue;
            }
            let sub = tape.gather_rows(ln_x, &tokens)?;
            let es = &expert_slots[e];
            let h = tape.linear(sub, es.w1, es.b1)?;
            let h = tape.silu(h)?;
            let h = tape.linear(h, es.w2, es.b2)?;
            let coords: Vec<(usize, usize)> = tokens.iter().map(|&b| (b, e)).collect();
            let g = tape.gather_elems(gates_id, &coords)?;
            let h = tape.scale_rows(h, g)?;
            let contribution = tape.scatter_rows(h, &tokens, batch)?;
            combined = Some(match combined {
                Some(acc) => tape.add(acc, contribution)?,
                None => contribution,
            });
        }
        let h_moe = combined.expect("top_k >= 1 routes every token");

        let output = match &self.head {
            MoeHead::Projection { proj, ln } => {
                let w = slots.next();
                let b = proj.bias.as_ref().map(|_| slots.next());
                let (hg, hb) = (slots.next(), slots.next());
                let p = tape.linear(h_moe, w, b)?;
                tape.layer_norm(p, hg, hb, ln.epsilon)?
            }
            MoeHead::Mlp { ln, w1, w2 } => {
                let (hg, hb) = (slots.next(), slots.next());
                let w1_id = slots.next();
                let b1 = w1.bias.as_ref().map(|_| slots.next());
                let w2_id = slots.next();
                let b2 = w2.bias.as_ref().map(|_| slots.next());
                let hn = tape.layer_norm(h_moe, hg, hb, ln.epsilon)?;
                let a = tape.linear(hn, w1_id, b1)?;
                let a = tape.silu(a)?;
                tape.linear(a, w2_id, b2)?
            }
        };

        Ok(ForwardResult {
            output,
            routing: Some(records),
            gates: Some(gates_id),
            gate_logits: Some(logits_id),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{AnyAdapter, AdapterConfig};

    fn moe(seed: u64) -> MoEAdapter<f64> {
        match AnyAdapter::init(&AdapterConfig::default(), seed).unwrap() {
            AnyAdapter::Moe(m) => m,
            _ => unreachable!(),
        }
    }

    #[test]
    fn route_examples() {
        // logits [3,1,2,0] with k=2 keep experts 0 and 2 with a two-way
        // softmax of (3, 2)
        let gate = LinearParams::new(
            Tensor::new(vec![4, 4], {
                // identity rows so logits == x
                let mut w = vec![0.0; 16];
                for i in 0..4 {
                    w[i * 4 + i] = 1.0;
                }
                w
            })
            .unwrap(),
            None,
        )
        .unwrap();
        let x = Tensor::<f64>::new(vec![1, 4], vec![3.0, 1.0, 2.0, 0.0]).unwrap();
        let records = route(&gate, &x, 2, 0).unwrap();
        assert_eq!(records[0].selected, vec![0, 2]);
        assert!((records[0].gates[0] - 0.7310585786300049).abs() < 1e-12);
        assert_eq!(records[0].gates[1], 0.0);
        assert!((records[0].gates[2] - 0.2689414213699951).abs() < 1e-12);
        assert_eq!(records[0].gates[3], 0.0);

        // k = N gives the plain softmax over everything
        let records = route(&gate, &x, 4, 0).unwrap();
        assert_eq!(records[0].selected, vec![0, 1, 2, 3]);
        let sum: f64 = records[0].gates.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(records[0].gates.iter().all(|&g| g > 0.0));

        // equal logits, k=1: tie rule selects expert 0 with gate 1
        let x = Tensor::new(vec![1, 4], vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        let records = route(&gate, &x, 1, 0).unwrap();
        assert_eq!(records[0].selected, vec![0]);
        assert_eq!(records[0].gates, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn gate_sums_and_sparsity() {
        let m = moe(11);
        let x = Tensor::new(vec![3, 32], (0..96).map(|i| (i as f64 * 0.37).sin()).collect())
            .unwrap();
        let records = m.route(&x).unwrap();
        for rec in &records {
            assert_eq!(rec.selected.len(), 4);
            let nonzero = rec.gates.iter().filter(|&&g| g != 0.0).count();
            assert_eq!(nonzero, 4);
            let sum: f64 = rec.gates.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            for (e, &g) in rec.gates.iter().enumerate() {
                assert_eq!(rec.selected.contains(&e), g != 0.0);
            }
        }
    }

    #[test]
    fn logit_scaling_preserves_selection() {
        let m = moe(5);
        let x = Tensor::new(vec![4, 32], (0..128).map(|i| (i as f64 * 0.11).cos()).collect())
            .unwrap();
        let before: Vec<Vec<usize>> = m.route(&x).unwrap().iter().map(|r| r.selected.clone()).collect();
        let mut scaled = m.clone();
        scaled.gate.weight = scaled.gate.weight.map(|w| w * 7.5);
        let after: Vec<Vec<usize>> = scaled.route(&x).unwrap().iter().map(|r| r.selected.clone()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn shared_experts_are_always_selected() {
        let mut cfg = AdapterConfig::default();
        cfg.n_shared = 2;
        cfg.top_k = 2;
        let m = match AnyAdapter::<f64>::init(&cfg, 3).unwrap() {
            AnyAdapter::Moe(m) => m,
            _ => unreachable!(),
        };
        let x = Tensor::new(vec![5, 32], (0..160).map(|i| (i as f64 * 0.21).sin()).collect())
            .unwrap();
        for rec in m.route(&x).unwrap() {
            assert_eq!(rec.selected.len(), 4);
            assert!(rec.selected.contains(&0) && rec.selected.contains(&1));
            let sum: f64 = rec.gates.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}
