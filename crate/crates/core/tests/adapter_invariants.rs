//! Structural invariants of the two adapters: parameter accounting,
//! initialization, routing identities, and the sparse-dispatch equivalence.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use moe_adapter::adapter::{
    count_params, AdapterConfig, AdapterKind, AnyAdapter, HeadVariant, MoEAdapter,
};
use moe_adapter::kernels::{self, LinearParams};
use moe_adapter::tensor::Tensor;
use moe_adapter::Tensor64;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor64 {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel)
        .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * scale)
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn as_moe(adapter: AnyAdapter<f64>) -> MoEAdapter<f64> {
    match adapter {
        AnyAdapter::Moe(m) => m,
        _ => panic!("expected moe"),
    }
}

#[test]
fn full_scale_parameter_accounting() {
    // component counts follow the 2*d*h closed forms
    let counts = count_params(&AdapterConfig::full_scale_moe()).unwrap();
    assert_eq!(counts.component("experts"), Some(52_428_800));
    assert_eq!(counts.component("gate"), Some(20_480));
    assert_eq!(counts.component("head_mlp"), Some(52_428_800));
    let non_ln_total = 52_428_800 + 20_480 + 52_428_800;
    assert_eq!(non_ln_total, 104_878_080);
    let non_ln_active = 4 * (52_428_800 / 8) + 20_480 + 52_428_800;
    assert_eq!(non_ln_active, 78_663_680);
    assert!(
        (non_ln_active as f64 / non_ln_total as f64 - 0.7501).abs() < 1e-4,
        "non-LN ratio"
    );

    // the function's own totals include layer norms; the active ratio still
    // lands on 0.750 +- 0.001
    assert!((counts.ratio - 0.750).abs() < 0.001, "ratio {}", counts.ratio);

    let dense = count_params(&AdapterConfig::full_scale_dense()).unwrap();
    assert_eq!(dense.component("w1"), Some(2560 * 20480));
    assert_eq!(dense.ratio, 1.0);
    assert_eq!(dense.active, dense.total);

    // matched budgets within 0.1%
    let rel = (counts.total as f64 - dense.total as f64).abs() / dense.total as f64;
    assert!(rel < 0.001, "budget mismatch {rel}");
}

#[test]
fn desk_presets_budget_match_exactly() {
    let dense = count_params(&AdapterConfig::preset("dense-base").unwrap()).unwrap();
    let moe = count_params(&AdapterConfig::preset("moe-8c4").unwrap()).unwrap();
    assert_eq!(dense.total, moe.total, "desk budgets");
    assert!(moe.active < moe.total);
}

#[test]
fn preset_names_resolve() {
    for name in [
        "dense-base",
        "moe-8c4",
        "moe-16c4",
        "moe-8c1",
        "moe-4c2",
        "moe-8c4-halfdim",
        "moe-8c4-doubledim",
        "8c4",
        "16c4",
    ] {
        AdapterConfig::preset(name).unwrap().validate().unwrap();
    }
    assert!(AdapterConfig::preset("moe-9000").is_err());
}

#[test]
fn init_is_seed_deterministic() {
    let cfg = AdapterConfig::default();
    let a = AnyAdapter::<f64>::init(&cfg, 42).unwrap();
    let b = AnyAdapter::<f64>::init(&cfg, 42).unwrap();
    assert_eq!(a, b);
    let c = AnyAdapter::<f64>::init(&cfg, 43).unwrap();
    assert_ne!(a, c);
}

#[test]
fn near_zero_gate_init_routes_near_uniformly() {
    let cfg = AdapterConfig::default();
    let m = as_moe(AnyAdapter::init(&cfg, 7).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..50 {
        let mut x = rand_tensor(&mut rng, &[cfg.input_dim], 1.0);
        let norm: f64 = x.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in x.data_mut() {
            *v /= norm;
        }
        let logits = kernels::linear(&x, &m.gate).unwrap();
        let probs = kernels::softmax(&logits).unwrap();
        let max = probs.data().iter().cloned().fold(f64::MIN, f64::max);
        let min = probs.data().iter().cloned().fold(f64::MAX, f64::min);
        assert!(max - min < 0.05, "probability gap {}", max - min);
    }
}

#[test]
fn dense_zero_weights_give_zero_output() {
    let cfg = AdapterConfig::preset("dense-base").unwrap();
    let mut adapter = AnyAdapter::<f64>::init(&cfg, 1).unwrap();
    if let AnyAdapter::Dense(d) = &mut adapter {
        d.w1.weight = Tensor::zeros(d.w1.weight.shape());
        d.w2.weight = Tensor::zeros(d.w2.weight.shape());
    }
    let x = rand_tensor(&mut ChaCha8Rng::seed_from_u64(3), &[2, 32], 1.0);
    let (y, _) = adapter.forward(&x).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn dense_forward_is_row_pure() {
    let cfg = AdapterConfig::preset("dense-base").unwrap();
    let adapter = AnyAdapter::<f64>::init(&cfg, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let row = rand_tensor(&mut rng, &[32], 1.0);
    let mut two = Vec::new();
    two.extend_from_slice(row.data());
    two.extend_from_slice(row.data());
    let batch = Tensor::new(vec![2, 32], two).unwrap();
    let (y, _) = adapter.forward(&batch).unwrap();
    assert_eq!(y.row(0), y.row(1));
}

#[test]
fn expert_forward_matches_straight_line_reimplementation() {
    // independent oracle: hand-written norm -> matmul -> silu -> matmul
    let cfg = AdapterConfig::default();
    let m = as_moe(AnyAdapter::init(&cfg, 21).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let x = rand_tensor(&mut rng, &[3, cfg.input_dim], 1.2);
    for i in [0usize, 3, 7] {
        let got = m.expert_forward(i, &x).unwrap();
        for r in 0..3 {
            let row = x.row(r);
            let d = row.len();
            let mean: f64 = row.iter().sum::<f64>() / d as f64;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let ln: Vec<f64> = row
                .iter()
                .enumerate()
                .map(|(j, v)| {
                    (v - mean) / (var + cfg.ln_epsilon).sqrt() * m.ln_in.gamma.data()[j]
                        + m.ln_in.beta.data()[j]
                })
                .collect();
            let e = &m.experts[i];
            let hidden: Vec<f64> = (0..cfg.expert_hidden)
                .map(|h| {
                    let pre: f64 = (0..d).map(|j| e.w1.weight.at2(h, j) * ln[j]).sum();
                    pre * (1.0 / (1.0 + (-pre).exp()))
                })
                .collect();
            for o in 0..d {
                let want: f64 = (0..cfg.expert_hidden)
                    .map(|h| e.w2.weight.at2(o, h) * hidden[h])
                    .sum();
                assert!(
                    (got.at2(r, o) - want).abs() < 1e-12,
                    "expert {i} row {r} out {o}"
                );
            }
        }
    }
}

#[test]
fn identical_experts_make_output_routing_invariant() {
    let cfg = AdapterConfig::default();
    let mut m = as_moe(AnyAdapter::init(&cfg, 31).unwrap());
    let proto = m.experts[0].clone();
    for e in m.experts.iter_mut() {
        *e = proto.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let x = rand_tensor(&mut rng, &[5, cfg.input_dim], 1.0);
    let base = AnyAdapter::Moe(m.clone()).forward(&x).unwrap().0;

    // retarget the router arbitrarily; gates still sum to 1 per token
    let mut rerouted = m.clone();
    rerouted.gate.weight = rand_tensor(&mut rng, &[cfg.n_experts, cfg.input_dim], 3.0);
    let moved = AnyAdapter::Moe(rerouted).forward(&x).unwrap().0;
    assert!(base.max_abs_diff(&moved) < 1e-10);
}

#[test]
fn degenerate_single_expert_moe_reduces_to_expert_plus_head() {
    let cfg = AdapterConfig {
        kind: AdapterKind::Moe,
        n_experts: 1,
        top_k: 1,
        expert_hidden: 16,
        head: HeadVariant::Mlp,
        ..AdapterConfig::default()
    };
    let m = as_moe(AnyAdapter::init(&cfg, 41).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let x = rand_tensor(&mut rng, &[4, cfg.input_dim], 1.0);
    let (full, records) = AnyAdapter::Moe(m.clone()).forward(&x).unwrap();
    for rec in records.unwrap() {
        assert_eq!(rec.gates, vec![1.0]);
    }
    // expert (gate weight is exactly 1) followed by the head
    let expert_out = m.expert_forward(0, &x).unwrap();
    let manual = match &m.head {
        moe_adapter::adapter::MoeHead::Mlp { ln, w1, w2 } => {
            let h = kernels::layer_norm(&expert_out, ln).unwrap();
            let h = kernels::linear(&h, w1).unwrap();
            let h = kernels::silu(&h).unwrap();
            kernels::linear(&h, w2).unwrap()
        }
        _ => unreachable!(),
    };
    assert!(full.max_abs_diff(&manual) < 1e-12);
}

#[test]
fn sparse_dispatch_equals_evaluate_all_reference() {
    for seed in 0..5u64 {
        let cfg = AdapterConfig::default();
        let m = as_moe(AnyAdapter::init(&cfg, 50 + seed).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(60 + seed);
        let x = rand_tensor(&mut rng, &[6, cfg.input_dim], 1.0);

        let (fast, records) = AnyAdapter::Moe(m.clone()).forward(&x).unwrap();
        let records = records.unwrap();

        // reference path: evaluate every expert for every token, weight by
        // gates (zeros included)
        let mut combined = Tensor64::zeros(&[6, cfg.input_dim]);
        for e in 0..cfg.n_experts {
            let out = m.expert_forward(e, &x).unwrap();
            for b in 0..6 {
                let g = records[b].gates[e];
                for j in 0..cfg.input_dim {
                    combined.row_mut(b)[j] += g * out.at2(b, j);
                }
            }
        }
        let manual = match &m.head {
            moe_adapter::adapter::MoeHead::Mlp { ln, w1, w2 } => {
                let h = kernels::layer_norm(&combined, ln).unwrap();
                let h = kernels::linear(&h, w1).unwrap();
                let h = kernels::silu(&h).unwrap();
                kernels::linear(&h, w2).unwrap()
            }
            _ => unreachable!(),
        };
        assert!(
            fast.max_abs_diff(&manual) < 1e-12,
            "seed {seed}: {}",
            fast.max_abs_diff(&manual)
        );
    }
}

#[test]
fn flat_segments_match_named_parameters() {
    for preset in ["dense-base", "moe-8c4"] {
        let cfg = AdapterConfig::preset(preset).unwrap();
        let mut adapter = AnyAdapter::<f64>::init(&cfg, 71).unwrap();
        let base = adapter.flatten();
        assert_eq!(base.len(), adapter.n_params());

        // perturbing exactly one named parameter changes exactly its segment
        let names: Vec<String> = adapter
            .named_params()
            .iter()
            .map(|(n, _)| n.clone())
            .collect();
        for (target_idx, target_name) in names.iter().enumerate() {
            let mut perturbed = adapter.clone();
            let mut offset = 0;
            let mut segment = (0, 0);
            for (i, (_, p)) in perturbed.named_params_mut().into_iter().enumerate() {
                if i == target_idx {
                    p.data_mut()[0] += 1.0;
                    segment = (offset, offset + p.numel());
                }
                offset += p.numel();
            }
            let flat = perturbed.flatten();
            for (i, (&a, &b)) in base.iter().zip(&flat).enumerate() {
                let inside = i >= segment.0 && i < segment.1;
                if inside {
                    if i == segment.0 {
                        assert_ne!(a, b, "{preset}/{target_name}: segment head unchanged");
                    }
                } else {
                    assert_eq!(a, b, "{preset}/{target_name}: leak outside segment at {i}");
                }
            }
        }

        // flatten/set_flat round trip
        let mut copy = AnyAdapter::<f64>::init(&cfg, 72).unwrap();
        copy.set_flat(&base).unwrap();
        assert_eq!(copy.flatten(), base);
    }
}

#[test]
fn config_validation_errors_name_fields() {
    let mut cfg = AdapterConfig::default();
    cfg.top_k = 9;
    let msg = cfg.validate().unwrap_err().to_string();
    assert!(msg.contains("top_k"), "{msg}");

    let mut cfg = AdapterConfig::default();
    cfg.ln_epsilon = 0.0;
    let msg = cfg.validate().unwrap_err().to_string();
    assert!(msg.contains("ln_epsilon"), "{msg}");

    // dense configs ignore expert fields entirely
    let mut cfg = AdapterConfig::preset("dense-base").unwrap();
    cfg.n_experts = 0;
    cfg.top_k = 0;
    assert!(cfg.validate().is_ok());
}

#[test]
fn route_rejects_bad_k() {
    let gate = LinearParams::new(Tensor64::zeros(&[4, 8]), None).unwrap();
    let x = Tensor64::zeros(&[1, 8]);
    assert!(moe_adapter::adapter::route(&gate, &x, 5, 0).is_err());
    assert!(moe_adapter::adapter::route(&gate, &x, 0, 0).is_err());
    assert!(moe_adapter::adapter::route(&gate, &x, 4, 1).is_err());
}
