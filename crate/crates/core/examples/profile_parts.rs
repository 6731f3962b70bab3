// Temporary: isolate forward+backward cost per pipeline stage.

use std::time::Instant;

use mlt_core::backbone;
use mlt_core::config::TrainConfig;
use mlt_core::graph::Graph;
use mlt_core::model::Model;
use mlt_core::mte;
use mlt_core::nn::BoundParams;
use mlt_core::synth::{generate, SynthSpec, Tier};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn main() {
    let cfg = TrainConfig::desk();
    let spec = SynthSpec {
        preset: cfg.model.preset,
        coarse_count: cfg.model.coarse_count,
        resolution: cfg.model.resolution,
        count: 1,
        tier: Tier::Easy,
        global_seed: 5,
    };
    let dataset = generate(&spec).unwrap();
    let model = Model::new(cfg.model.clone(), 11).unwrap();
    let rec = &dataset.records[0];

    // backbone alone, 8 samples
    for _ in 0..2 {
        let t = Instant::now();
        let mut g = Graph::new();
        let bound = BoundParams::mount(&mut g, &model.store);
        let mut last = None;
        for _ in 0..8 {
            let image = g.constant(rec.image.clone().into_dyn());
            let f = backbone::extract_features(&mut g, image, &bound, &model.config.backbone).unwrap();
            let pooled = g.pool_spatial_mean(f);
            let s = g.mean_all(pooled);
            last = Some(match last {
                None => s,
                Some(p) => g.add(p, s),
            });
        }
        let fwd = t.elapsed();
        let t = Instant::now();
        g.backward(last.unwrap());
        println!("backbone x8: fwd {fwd:?}, bwd {:?}, nodes {}", t.elapsed(), g.len());
    }

    // MTE alone on random tokens, 8 samples
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let tokens: Array2<f64> = {
        let mut t = Array2::zeros((model.config.token_count(), model.config.feature_width() + 3));
        t.mapv_inplace(|_| rng.gen_range(-1.0..1.0));
        t
    };
    for _ in 0..2 {
        let t = Instant::now();
        let mut g = Graph::new();
        let bound = BoundParams::mount(&mut g, &model.store);
        let mut last = None;
        for _ in 0..8 {
            let q = g.constant2(tokens.clone());
            let out = mte::encode(&mut g, q, &bound, &model.config.encoder).unwrap();
            let s1 = g.mean_all(out.joints3d);
            let s2 = g.mean_all(out.coarse_vertices);
            let s = g.add(s1, s2);
            last = Some(match last {
                None => s,
                Some(p) => g.add(p, s),
            });
        }
        let fwd = t.elapsed();
        let t = Instant::now();
        g.backward(last.unwrap());
        println!("mte x8: fwd {fwd:?}, bwd {:?}, nodes {}", t.elapsed(), g.len());
    }

}
