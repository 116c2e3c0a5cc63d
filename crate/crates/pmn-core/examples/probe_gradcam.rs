use pmn_core::interpret;
use pmn_core::model::Model;
use pmn_core::signal::default_fault_specs;
use pmn_core::train::{load_or_generate_data, train, RunConfig};
use std::path::Path;

fn main() {
    let config = RunConfig { seed: 1, ..RunConfig::default() };
    let ckpt = Path::new("/tmp/probe_runA.pmn");
    let (model, test_set) = if ckpt.exists() {
        let (m, cfg, _) = pmn_core::checkpoint::load(ckpt).unwrap();
        let (_, te) = load_or_generate_data(&cfg).unwrap();
        (m, te)
    } else {
        let (tr, te) = load_or_generate_data(&config).unwrap();
        let outcome = train(&config, &tr, &te, None).unwrap();
        pmn_core::checkpoint::save(ckpt, &outcome.final_model, &config, 49).unwrap();
        (outcome.final_model, te)
    };
    let Model::Pmn(pmn) = &model else { panic!() };
    let specs = default_fault_specs();

    // Per class: distribution of the argmax quarter of the attribution map.
    let mut quarter_hist = vec![[0usize; 4]; 4];
    let mut hits = vec![(0usize, 0usize); 4]; // (top5 hit, correct count)
    for sample in &test_set.samples {
        let cls = pmn.classify(&sample.bins).unwrap();
        let y = sample.label as usize;
        if cls.predicted != y { continue; }
        hits[y].1 += 1;
        let map = interpret::grad_cam(pmn, &sample.bins).unwrap();
        let argmax = map.scores.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
        quarter_hist[y][argmax / 256] += 1;
        let disc = specs[y].dominant_bin();
        let mut order: Vec<usize> = (0..1024).collect();
        order.sort_by(|&a, &b| map.scores[b].partial_cmp(&map.scores[a]).unwrap().then(a.cmp(&b)));
        if order[..5].iter().any(|&b| b.abs_diff(disc) <= 2) { hits[y].0 += 1; }
    }
    for c in 0..4 {
        println!("class {c} (disc bin {}): quarters {:?}, top5 hits {}/{}",
            specs[c].dominant_bin(), quarter_hist[c], hits[c].0, hits[c].1);
    }
    // One attribution profile per class for a closer look.
    for c in 0..4u16 {
        let s = test_set.samples.iter().find(|s| s.label == c).unwrap();
        let map = interpret::grad_cam(pmn, &s.bins).unwrap();
        let knots: Vec<f64> = [128usize, 384, 640, 896].iter().map(|&b| map.scores[b]).collect();
        println!("class {c}: knot values {:?}", knots.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>());
    }
}
