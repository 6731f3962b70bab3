// Temporary: break one desk training step into phases.

use std::time::Instant;

use mlt_core::config::TrainConfig;
use mlt_core::graph::Graph;
use mlt_core::model::Model;
use mlt_core::nn::BoundParams;
use mlt_core::synth::{generate, SynthSpec, Tier};
use mlt_core::tokenizer::MvmPlan;

fn main() {
    let cfg = TrainConfig::desk();
    let spec = SynthSpec {
        preset: cfg.model.preset,
        coarse_count: cfg.model.coarse_count,
        resolution: cfg.model.resolution,
        count: 8,
        tier: Tier::Easy,
        global_seed: 5,
    };
    let dataset = generate(&spec).unwrap();
    let model = Model::new(cfg.model.clone(), 11).unwrap();

    for round in 0..3 {
        let t0 = Instant::now();
        let mut g = Graph::new();
        let bound = BoundParams::mount(&mut g, &model.store);
        let mount_t = t0.elapsed();

        let t1 = Instant::now();
        let mut per_sample = Vec::new();
        let mut losses = Vec::new();
        for rec in &dataset.records {
            let ts = Instant::now();
            let image = g.constant(rec.image.clone().into_dyn());
            let plan = MvmPlan::none(model.config.token_count());
            let lg = model
                .loss_graph(&mut g, image, &bound, &plan, &rec.gt, &cfg.loss)
                .unwrap();
            per_sample.push(ts.elapsed());
            losses.push(lg.total);
        }
        let fwd_t = t1.elapsed();

        let t2 = Instant::now();
        let n = losses.len();
        let mut total = losses[0];
        for &l in &losses[1..] {
            total = g.add(total, l);
        }
        let inv = 1.0 / n as f64;
        let mean = g.scale(total, inv);
        let combine_t = t2.elapsed();

        let t3 = Instant::now();
        g.backward(mean);
        let bwd_t = t3.elapsed();

        let t4 = Instant::now();
        let grads = bound.collect_grads(&g);
        let collect_t = t4.elapsed();

        println!(
            "round {round}: mount {mount_t:?}, forward {fwd_t:?} (first sample {:?}), combine {combine_t:?}, backward {bwd_t:?}, collect {collect_t:?}, nodes {}",
            per_sample[0],
            g.len(),
        );
        let _ = grads;
    }
}
