// Temporary measurement harness: step cost and convergence for the desk
// overfit run. Usage: overfit_probe <lr> <epochs> <mask_ratio>

use std::time::Instant;

use mlt_core::config::TrainConfig;
use mlt_core::model::Model;
use mlt_core::synth::{generate, SynthSpec, Tier};
use mlt_core::trainer::{evaluate, train};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(2e-3);
    let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(50);
    let mask: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.0);

    let mut cfg = TrainConfig::desk();
    cfg.optim.base_lr = lr;
    cfg.optim.epochs = epochs;
    cfg.optim.batch_size = 8;
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
    let t0 = Instant::now();
    let dataset = generate(&spec).unwrap();
    println!("dataset: {:?}", t0.elapsed());

    let t0 = Instant::now();
    let mut model = Model::new(cfg.model.clone(), 11).unwrap();
    println!("model init: {:?}", t0.elapsed());

    let t0 = Instant::now();
    let report = train(&mut model, &dataset, &cfg, None).unwrap();
    let train_wall = t0.elapsed();
    let steps = report.step_losses.len();
    println!(
        "train: {:?} total, {} steps, {:.3} s/step",
        train_wall,
        steps,
        train_wall.as_secs_f64() / steps as f64
    );
    println!("step0 loss: {:.6}", report.step_losses[0]);
    for e in report
        .epochs
        .iter()
        .filter(|e| e.epoch % 10 == 0 || e.epoch + 1 == epochs)
    {
        println!("  epoch {:4}  mean {:.6}  lr {:.3e}", e.epoch, e.mean_total, e.last_lr);
    }
    let last = report.epochs.last().unwrap();
    println!(
        "ratio last_epoch_mean/step0 = {:.4}",
        last.mean_total / report.step_losses[0]
    );
    let final_loss = *report.step_losses.last().unwrap();
    println!("ratio last_step/step0 = {:.4}", final_loss / report.step_losses[0]);

    let t0 = Instant::now();
    let stats = evaluate(&mut model, &dataset).unwrap();
    println!("eval: {:?}  {:?}", t0.elapsed(), stats);
}
