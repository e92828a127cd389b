//! Joint training objective: classification cross-entropy plus the
//! load-balancing penalty over routed experts.

use serde::{Deserialize, Serialize};

use crate::adapter::RoutingRecord;
use crate::error::{Error, Result};
use crate::kernels;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the balance penalty in the joint loss.
    pub lambda: f64,
    /// Class count of the surrogate task.
    pub vocab: usize,
    /// Compute expert importance from the raw (pre-mask) softmax instead of
    /// the post-top-k gates. Off by default; requires n_shared = 0.
    pub raw_softmax_importance: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.01,
            vocab: 8,
            raw_softmax_importance: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "loss.lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        if self.vocab < 2 {
            return Err(Error::InvalidConfig(format!(
                "loss.vocab must be at least 2, got {}",
                self.vocab
            )));
        }
        Ok(())
    }
}

/// Batch routing statistics: expert importance (mean gate probability),
/// expert load (selection frequency), and the balance penalty.
#[derive(Debug, Clone, PartialEq)]
pub struct BalanceStats<T> {
    pub importance: Vec<T>,
    pub load: Vec<T>,
    pub aux_loss: T,
    pub tokens: usize,
}

/// Mean negative log-likelihood of `targets` under softmax of `logits`.
pub fn task_loss<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> Result<T> {
    kernels::cross_entropy(logits, targets)
}

/// Importance, load, and balance penalty from per-token routing records.
///
/// Importance uses the post-top-k gates (zero for unrouted experts) unless
/// `raw_softmax_importance` asks for the pre-mask softmax of the logits.
/// With `n_shared > 0` the penalty covers only the routable tail
/// `e >= n_shared` and the multiplier is the routable expert count.
pub fn balance_stats<T: Scalar>(
    records: &[RoutingRecord<T>],
    n_experts: usize,
    n_shared: usize,
    raw_softmax_importance: bool,
) -> Result<BalanceStats<T>> {
    if records.is_empty() {
        return Err(Error::InvalidConfig(
            "balance_stats: empty batch".to_string(),
        ));
    }
    if raw_softmax_importance && n_shared > 0 {
        return Err(Error::InvalidConfig(
            "loss.raw_softmax_importance requires n_shared = 0".to_string(),
        ));
    }
    let batch = records.len();
    let inv_b = T::one() / T::from_f64(batch as f64);
    let mut importance = vec![T::zero(); n_experts];
    let mut load = vec![T::zero(); n_experts];
    for rec in records {
        if rec.gates.len() != n_experts {
            return Err(Error::ShapeMismatch {
                op: "balance_stats",
                expected: vec![n_experts],
                got: vec![rec.gates.len()],
            });
        }
        if raw_softmax_importance {
            let p = kernels::softmax(&Tensor::from_vec(rec.logits.clone()))?;
            for (e, &v) in p.data().iter().enumerate() {
                importance[e] += v;
            }
        } else {
            for (e, &g) in rec.gates.iter().enumerate() {
                importance[e] += g;
            }
        }
        for &e in &rec.selected {
            load[e] += T::one();
        }
    }
    for v in importance.iter_mut() {
        *v = *v * inv_b;
    }
    for v in load.iter_mut() {
        *v = *v * inv_b;
    }
    let aux_loss = kernels::balance_penalty_from(&importance, &load, n_shared);
    Ok(BalanceStats {
        importance,
        load,
        aux_loss,
        tokens: batch,
    })
}

/// `task + lambda * aux`. With `lambda = 0` this reproduces the
/// no-balance-loss ablation.
pub fn joint_loss<T: Scalar>(task: T, stats: &BalanceStats<T>, cfg: &LossConfig) -> T {
    task + T::from_f64(cfg.lambda) * stats.aux_loss
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(n: usize, selected: Vec<usize>, gates: Vec<f64>) -> RoutingRecord<f64> {
        RoutingRecord {
            logits: vec![0.0; n],
            selected,
            gates,
        }
    }

    #[test]
    fn two_expert_half_split() {
        // N=2, k=1, four tokens alternating experts; every gate is 1
        let records = vec![
            record(2, vec![0], vec![1.0, 0.0]),
            record(2, vec![0], vec![1.0, 0.0]),
            record(2, vec![1], vec![0.0, 1.0]),
            record(2, vec![1], vec![0.0, 1.0]),
        ];
        let stats = balance_stats(&records, 2, 0, false).unwrap();
        assert_eq!(stats.importance, vec![0.5, 0.5]);
        assert_eq!(stats.load, vec![0.5, 0.5]);
        assert!((stats.aux_loss - 1.0).abs() < 1e-15);
    }

    #[test]
    fn full_collapse_hits_n() {
        let records: Vec<_> = (0..16)
            .map(|_| record(8, vec![0], {
                let mut g = vec![0.0; 8];
                g[0] = 1.0;
                g
            }))
            .collect();
        let stats = balance_stats(&records, 8, 0, false).unwrap();
        assert!((stats.aux_loss - 8.0).abs() < 1e-15);
    }

    #[test]
    fn uniform_routing_hits_k() {
        // N=6, k=2: token b selects experts (b, b+1 mod 6) with gates 1/2
        let n = 6;
        let k = 2;
        let records: Vec<_> = (0..n)
            .map(|b| {
                let sel = vec![b, (b + 1) % n];
                let mut g = vec![0.0; n];
                for &e in &sel {
                    g[e] = 0.5;
                }
                let mut sel = sel;
                sel.sort_unstable();
                record(n, sel, g)
            })
            .collect();
        let stats = balance_stats(&records, n, 0, false).unwrap();
        let sum_imp: f64 = stats.importance.iter().sum();
        let sum_load: f64 = stats.load.iter().sum();
        assert!((sum_imp - 1.0).abs() < 1e-10);
        assert!((sum_load - k as f64).abs() < 1e-10);
        assert!((stats.aux_loss - k as f64).abs() < 1e-10);
    }

    #[test]
    fn joint_loss_lambda() {
        let stats = BalanceStats::<f64> {
            importance: vec![],
            load: vec![],
            aux_loss: 1.5,
            tokens: 1,
        };
        let cfg = LossConfig {
            lambda: 0.01,
            ..LossConfig::default()
        };
        assert!((joint_loss(2.0, &stats, &cfg) - 2.015).abs() < 1e-12);
        let zero = LossConfig {
            lambda: 0.0,
            ..LossConfig::default()
        };
        assert_eq!(joint_loss(2.0, &stats, &zero), 2.0);
    }

    #[test]
    fn aux_is_permutation_equivariant() {
        // permuting tokens leaves the penalty unchanged; permuting expert
        // indices permutes the stats and leaves the penalty unchanged
        let records = vec![
            record(3, vec![0, 2], vec![0.7, 0.0, 0.3]),
            record(3, vec![1, 2], vec![0.0, 0.4, 0.6]),
            record(3, vec![0, 1], vec![0.2, 0.8, 0.0]),
        ];
        let base = balance_stats(&records, 3, 0, false).unwrap();

        let mut shuffled = records.clone();
        shuffled.swap(0, 2);
        let tok = balance_stats(&shuffled, 3, 0, false).unwrap();
        assert_eq!(base.aux_loss, tok.aux_loss);

        // expert permutation 0->1, 1->2, 2->0
        let perm = [1usize, 2, 0];
        let permuted: Vec<_> = records
            .iter()
            .map(|r| {
                let mut gates = vec![0.0; 3];
                for e in 0..3 {
                    gates[perm[e]] = r.gates[e];
                }
                let mut selected: Vec<usize> = r.selected.iter().map(|&e| perm[e]).collect();
                selected.sort_unstable();
                record(3, selected, gates)
            })
            .collect();
        let per = balance_stats(&permuted, 3, 0, false).unwrap();
        assert!((base.aux_loss - per.aux_loss).abs() < 1e-12);
        for e in 0..3 {
            assert_eq!(base.importance[e], per.importance[perm[e]]);
            assert_eq!(base.load[e], per.load[perm[e]]);
        }
    }
}
