// Temporary: watch the theta pathway during a short training run.

use mlt_core::config::TrainConfig;
use mlt_core::graph::Graph;
use mlt_core::nn::BoundParams;
use mlt_core::model::{regress_theta, Model};
use mlt_core::synth::{generate, SynthRecord, SynthSpec, Tier};
use mlt_core::trainer::train;
use mlt_core::backbone;

fn inspect(model: &Model, rec: &SynthRecord, label: &str) {
    let mut g = Graph::new();
    let iv = g.constant(rec.image.clone().into_dyn());
    let bound = BoundParams::mount_frozen(&mut g, &model.store);
    let features = backbone::extract_features(&mut g, iv, &bound, &model.config.backbone).unwrap();
    let pooled = g.pool_spatial_mean(features);
    let theta = regress_theta(&mut g, features, &bound).unwrap();
    let pv = g.value1(pooled);
    let tv = g.value1(theta);
    let pooled_rms = (pv.iter().map(|x| x * x).sum::<f64>() / pv.len() as f64).sqrt();
    let theta_max = tv.iter().fold(0f64, |a, b| a.max(b.abs()));
    let pose_rms = (tv.iter().take(72).map(|x| x * x).sum::<f64>() / 72.0).sqrt();
    println!(
        "{label}: pooled rms {pooled_rms:.4} | theta max {theta_max:.5} pose rms {pose_rms:.5} shape[0] {:.5}",
        tv[72]
    );
    let fc3 = model.store.get("template.regress.fc3.weight").unwrap();
    let fc3_rms = (fc3.iter().map(|x| x * x).sum::<f64>() / fc3.len() as f64).sqrt();
    let fc1 = model.store.get("template.regress.fc1.weight").unwrap();
    let fc1_rms = (fc1.iter().map(|x| x * x).sum::<f64>() / fc1.len() as f64).sqrt();
    println!("  fc1 rms {fc1_rms:.6} fc3 rms {fc3_rms:.6}");

    let out = model.forward_eval(&rec.image).unwrap();
    let rms2 = |a: &ndarray::Array2<f64>| {
        (a.iter().map(|x| x * x).sum::<f64>() / a.len() as f64).sqrt()
    };
    println!(
        "  pred rms: coarse {:.3} fine {:.3} j3d {:.3} j2d {:.3} cam [{:.3} {:.3} {:.3}]",
        rms2(&out.prediction.coarse_vertices),
        rms2(&out.prediction.fine_vertices),
        rms2(&out.prediction.joints3d),
        rms2(&out.prediction.joints2d),
        out.camera[0],
        out.camera[1],
        out.camera[2]
    );
    println!(
        "  gt rms:   coarse {:.3} j3d {:.3} j2d {:.3} cam [{:.3} {:.3} {:.3}]",
        rms2(&rec.gt.coarse_vertices),
        rms2(&rec.gt.joints3d),
        rms2(&rec.gt.joints2d),
        rec.camera[0],
        rec.camera[1],
        rec.camera[2]
    );
}

fn main() {
    let mut cfg = TrainConfig::desk();
    cfg.optim.base_lr = 1e-4;
    cfg.optim.batch_size = 8;
    cfg.optim.seed = 11;
    cfg.optim.checkpoint_every = 0;
    cfg.optim.epochs = 20;

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

    inspect(&model, &dataset.records[0], "step    0 sample 0");
    inspect(&model, &dataset.records[1], "step    0 sample 1");
    let report = train(&mut model, &dataset, &cfg, None).unwrap();
    println!("trained {} steps", report.total_steps);
    inspect(&model, &dataset.records[0], "step   40 sample 0");
    inspect(&model, &dataset.records[1], "step   40 sample 1");

    // template divergence between two samples
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
    println!("template mean distance sample0 vs sample1: {:.6}", dist / ta.nrows() as f64);
}
