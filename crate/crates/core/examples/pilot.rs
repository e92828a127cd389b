// scratch pilot for the reference experiment; not part of the deliverable
use moe_adapter::adapter::AdapterConfig;
use moe_adapter::analysis::*;
use moe_adapter::dataset::*;
use moe_adapter::objectives::LossConfig;
use moe_adapter::optim::OptimConfig;
use moe_adapter::trainer::*;

fn main() {
    let t0 = std::time::Instant::now();
    for seed in [0u64, 1, 2] {
        let data_cfg = ConflictDatasetConfig {
            seed,
            ..Default::default()
        };
        let ds = make_dataset::<f64>(&data_cfg).unwrap();
        println!("seed {seed}: dataset attempt {}", ds.attempt);

        let optim = OptimConfig {
            seed,
            ..Default::default()
        };
        let loss = LossConfig::default();

        for preset in ["dense-base", "moe-8c4"] {
            let cfg = AdapterConfig::preset(preset).unwrap();
            let mut probe = TrajectoryProbe::new(&ds, 100, 64, seed ^ 0xABCD);
            let out = train(&ds, &cfg, &loss, &optim, Some(&mut probe)).unwrap();
            let traj = probe.mean_cosine();
            let first = &out.log.steps[..50];
            let early_task: f64 =
                first.iter().map(|s| s.task_loss).sum::<f64>() / first.len() as f64;
            let last = &out.log.steps[out.log.steps.len() - 100..];
            let final_task: f64 =
                last.iter().map(|s| s.task_loss).sum::<f64>() / last.len() as f64;
            let sm = traj[0][1];
            let mean_off = (traj[0][1] + traj[0][2] + traj[1][2]) * 2.0
                / 6.0;
            println!(
                "  {preset}: task {early_task:.3} -> {final_task:.3}, traj cos(speech,music) {sm:+.3}, mean offdiag {mean_off:+.3}"
            );

            let opts = AnalysisOptions {
                seed: seed ^ 0x5EED,
                ..Default::default()
            };
            let report = analyze_checkpoint(&out.adapter, &ds, &opts, None, None).unwrap();
            let neg = negative_offdiag_cells(&report.influence);
            println!(
                "  {preset}: ckpt cos(s,m) {:?}, neg influence cells {neg}, unreliable {:?}",
                report.cosine[0][1], report.influence_unreliable
            );
            if let Some(act) = &report.activation {
                let mut max_diff = 0.0f64;
                for row in act {
                    let mx = row.iter().cloned().fold(f64::MIN, f64::max);
                    let mn = row.iter().cloned().fold(f64::MAX, f64::min);
                    max_diff = max_diff.max(mx - mn);
                }
                println!("  {preset}: max activation-rate spread {max_diff:.3}");
                for (e, row) in act.iter().enumerate() {
                    println!(
                        "    e{e}: {}",
                        row.iter()
                            .map(|v| format!("{v:.2}"))
                            .collect::<Vec<_>>()
                            .join(" ")
                    );
                }
            }
        }

        // EBL ablation on the default preset with identical seed
        let cfg = AdapterConfig::preset("moe-8c4").unwrap();
        let with = train(&ds, &cfg, &loss, &optim, None).unwrap();
        let without = train(
            &ds,
            &cfg,
            &LossConfig {
                lambda: 0.0,
                ..loss.clone()
            },
            &optim,
            None,
        )
        .unwrap();
        let cv_with = load_cv_tail(&with.log, 0.2).unwrap();
        let cv_without = load_cv_tail(&without.log, 0.2).unwrap();
        let max_with = mean_load_tail(&with.log, 0.2)
            .unwrap()
            .into_iter()
            .fold(f64::MIN, f64::max);
        let max_without = mean_load_tail(&without.log, 0.2)
            .unwrap()
            .into_iter()
            .fold(f64::MIN, f64::max);
        println!(
            "  EBL 8c4: cv {cv_with:.4} (on) vs {cv_without:.4} (off); max load {max_with:.3} vs {max_without:.3} (balanced 0.5)"
        );

        let cfg = AdapterConfig::preset("moe-8c1").unwrap();
        let with = train(&ds, &cfg, &loss, &optim, None).unwrap();
        let without = train(
            &ds,
            &cfg,
            &LossConfig {
                lambda: 0.0,
                ..loss.clone()
            },
            &optim,
            None,
        )
        .unwrap();
        let cv_with = load_cv_tail(&with.log, 0.2).unwrap();
        let cv_without = load_cv_tail(&without.log, 0.2).unwrap();
        let max_with = mean_load_tail(&with.log, 0.2)
            .unwrap()
            .into_iter()
            .fold(f64::MIN, f64::max);
        let max_without = mean_load_tail(&without.log, 0.2)
            .unwrap()
            .into_iter()
            .fold(f64::MIN, f64::max);
        println!(
            "  EBL 8c1: cv {cv_with:.4} (on) vs {cv_without:.4} (off); max load {max_with:.3} vs {max_without:.3} (balanced 0.125)"
        );
    }
    println!("pilot took {:.1}s", t0.elapsed().as_secs_f64());
}
