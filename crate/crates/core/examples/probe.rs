// Scratch calibration for experiment configs. Not part of the build.

use std::time::Instant;

use dnsvrgda::data::{gen_synthetic_1, shard_splits};
use dnsvrgda::graph::{build_topology, metropolis_weights, TopologyKind};
use dnsvrgda::optim::{HyperParams, RunOptions, Runner};
use dnsvrgda::problem::{Activation, MlpHyperOpt};

fn main() {
    let t_max: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1500);
    let which = std::env::args().nth(2).unwrap_or_else(|| "syn1_0.1".into());
    let (tr, vl, te) = match which.as_str() {
        "syn1_0.1" => gen_synthetic_1(10_000, 100, 0.1, 42),
        "syn1_0.05" => gen_synthetic_1(10_000, 100, 0.05, 42),
        "syn2" => dnsvrgda::data::gen_synthetic_2(10_000, 100, 0.1, 0.1, 42),
        other => panic!("unknown dataset {other}"),
    };
    let shards = shard_splits(&tr, &vl, &te, 8).unwrap();
    let problem = MlpHyperOpt::new(shards, 20, Activation::Tanh);
    let topo = build_topology(TopologyKind::Line, 8).unwrap();
    let mixing = metropolis_weights(&topo).unwrap();
    let hp = HyperParams {
        eta_x: 1e-3,
        eta_y: 1e-3,
        eta_z: 1e-3,
        gamma_x: 0.1,
        gamma_y: 0.1,
        gamma_z: 0.1,
        delta: 0.3,
        batch0: 320,
        batch: 32,
        iterations: t_max,
        normalized: true,
        variance_reduced: true,
    };
    for seed in 0..5u64 {
        for normalized in [true, false] {
            let mut params = hp.clone();
            params.normalized = normalized;
            let opts = RunOptions {
                seed,
                diag_every: 0,
                eval_every: 200,
                parallel: true,
                ..RunOptions::default()
            };
            let clock = Instant::now();
            let mut runner = Runner::new(&problem, &mixing, &params, opts).unwrap();
            let out = runner.run();
            let elapsed = clock.elapsed().as_secs_f64();
            let label = if normalized { "D-NSVRGDA" } else { "D-SVRGDA " };
            match out.divergence {
                Some(div) => println!(
                    "seed {seed} {label}: DIVERGED at t={} worker={} ({}) [{elapsed:.1}s]",
                    div.iteration, div.worker, div.stage
                ),
                None => println!(
                    "seed {seed} {label}: final loss {:.4} acc {:.4} [{elapsed:.1}s]",
                    out.final_loss.unwrap(),
                    out.final_accuracy.unwrap()
                ),
            }
            // Progress trace for the first seed.
            if seed == 0 {
                for rec in &out.records {
                    if let (Some(l), Some(a)) = (rec.upper_loss, rec.test_accuracy) {
                        println!("    t={:5} loss {:.4} acc {:.4} cons_x {:.2e}", rec.t, l, a, rec.consensus_x);
                    }
                }
            }
        }
    }
}
