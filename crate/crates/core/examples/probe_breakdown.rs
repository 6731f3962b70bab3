// Temporary: per-term loss trajectory and periodic train-set metrics.
// Usage: probe_breakdown <lr> <epochs> <batch> [mask]

use std::time::Instant;

use mlt_core::config::TrainConfig;
use mlt_core::model::Model;
use mlt_core::synth::{generate, SynthSpec, Tier};
use mlt_core::trainer::{evaluate, train};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1e-4);
    let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(50);
    let batch: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(8);
    let mask: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(0.0);

    let mut cfg = TrainConfig::desk();
    cfg.optim.base_lr = lr;
    cfg.optim.batch_size = batch;
    cfg.optim.mask_ratio = mask;
    cfg.optim.seed = 11;
    cfg.optim.checkpoint_every = 0;

    let spec = SynthSpec {
        preset: cfg.model.preset,
        coarse_count: cfg.model.coarse_count,
        resolution: cfg.model.resolution,
        count: 16,
        tier: Tier::Easy,
        global_seed: 5,
    };
    let dataset = generate(&spec).unwrap();
    let mut model = Model::new(cfg.model.clone(), 11).unwrap();

    // chunked training so we can interleave evals
    let chunk: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(10);
    let mut done = 0usize;
    let t0 = Instant::now();
    let mut step0: Option<f64> = None;
    while done < epochs {
        let n = chunk.min(epochs - done);
        cfg.optim.epochs = n;
        let report = train(&mut model, &dataset, &cfg, None).unwrap();
        if step0.is_none() {
            step0 = report.step_losses.first().copied();
            let e0 = &report.epochs[0];
            let b = &e0.mean_breakdown;
            println!(
                "step0 {:.4}; epoch0 l_v {:.4} l_j {:.4} l_j_reg {:.4} l_v_temp {:.4} l_j_proj {:.4}",
                step0.unwrap(),
                b.l_v,
                b.l_j,
                b.l_j_reg,
                b.l_v_temp,
                b.l_j_proj
            );
        }
        done += n;
        let last = report.epochs.last().unwrap();
        let b = &last.mean_breakdown;
        let stats = evaluate(&model, &dataset).unwrap();
        println!(
            "epoch {done:4} ({:6.1}s): total {:.4} | l_v {:.4} l_j {:.4} l_j_reg {:.4} l_v_temp {:.4} l_j_proj {:.4} | mpjpe {:.4} mpve {:.4} pa {:.4}",
            t0.elapsed().as_secs_f64(),
            last.mean_total,
            b.l_v,
            b.l_j,
            b.l_j_reg,
            b.l_v_temp,
            b.l_j_proj,
            stats.mpjpe,
            stats.mpve,
            stats.pa_mpjpe
        );
    }
    let a = model.forward_eval(&dataset.records[0].image).unwrap();
    let b = model.forward_eval(&dataset.records[1].image).unwrap();
    let ta = &a.template.template_coarse;
    let tb = &b.template.template_coarse;
    let mut dist = 0.0;
    for (ra, rb) in ta.outer_iter().zip(tb.outer_iter()) {
        let d: f64 = ra
            .iter()
            .zip(rb.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        dist += d.sqrt();
    }
    println!(
        "template mean distance sample0 vs sample1: {:.6}",
        dist / ta.nrows() as f64
    );
}
