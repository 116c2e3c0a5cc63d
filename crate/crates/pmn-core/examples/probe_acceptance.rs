use pmn_core::interpret;
use pmn_core::model::Model;
use pmn_core::signal::{clean_template, default_fault_specs, AugmentConfig};
use pmn_core::train::{load_or_generate_data, train, RunConfig, Variant};

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn main() {
    let seed = 1;

    // Run A: default task at (0.1, 100) — criteria 5, 7, 8, 9.
    let config = RunConfig { seed, ..RunConfig::default() };
    let (train_set, test_set) = load_or_generate_data(&config).unwrap();
    let t0 = std::time::Instant::now();
    let outcome = train(&config, &train_set, &test_set, None).unwrap();
    println!("runA (0.1-100) took {:.1?}; final test_acc {:.4}, best {:.4}",
        t0.elapsed(), outcome.log.last().unwrap().test_acc, outcome.best_test_acc);

    let model = outcome.final_model;
    let Model::Pmn(pmn) = &model else { panic!() };

    // Criterion 7: decoded prototypes vs clean templates.
    let specs = default_fault_specs();
    let decoded = interpret::decode_prototypes(pmn).unwrap();
    for (j, dec) in decoded.iter().enumerate() {
        let class = j % 4;
        let template = clean_template(&specs[class]).unwrap();
        println!("proto {j} (class {class}): cosine to template = {:.4}", cosine(dec, &template));
    }

    // Criteria 8 & 9 over correctly classified test samples.
    let mut correct = 0usize;
    let mut top5_hit = 0usize;
    let mut dist_up = 0usize;
    for sample in &test_set.samples {
        let cls = pmn.classify(&sample.bins).unwrap();
        if cls.predicted != sample.label as usize { continue; }
        correct += 1;
        let disc = specs[sample.label as usize].dominant_bin();

        // criterion 8
        let map = interpret::grad_cam(pmn, &sample.bins).unwrap();
        let mut order: Vec<usize> = (0..map.scores.len()).collect();
        order.sort_by(|&a, &b| map.scores[b].partial_cmp(&map.scores[a]).unwrap().then(a.cmp(&b)));
        if order[..5].iter().any(|&b| b.abs_diff(disc) <= 2) { top5_hit += 1; }

        // criterion 9
        let base_min = cls.distances.iter().cloned().fold(f64::INFINITY, f64::min);
        let mut masked = sample.bins.clone();
        let lo = disc.saturating_sub(50);
        let hi = (disc + 51).min(masked.len());
        masked[lo..hi].iter_mut().for_each(|v| *v = 0.0);
        let masked_cls = pmn.classify(&masked).unwrap();
        let masked_min = masked_cls.distances.iter().cloned().fold(f64::INFINITY, f64::min);
        if masked_min > base_min { dist_up += 1; }
    }
    println!("correct: {correct}/{}; top5 attribution hits: {} ({:.1}%); masked-distance-up: {} ({:.1}%)",
        test_set.len(), top5_hit, 100.0 * top5_hit as f64 / correct as f64,
        dist_up, 100.0 * dist_up as f64 / correct as f64);

    // Run B: (0.2, 200) PMN vs baseline — criterion 6.
    let aug = AugmentConfig { v: 0.2, d: 200, probability: 0.5 };
    let config_pmn = RunConfig { seed, augment: aug, ..RunConfig::default() };
    let (tr2, te2) = load_or_generate_data(&config_pmn).unwrap();
    let out_pmn = train(&config_pmn, &tr2, &te2, None).unwrap();
    let config_base = RunConfig { variant: Variant::AeMlpBaseline, ..config_pmn.clone() };
    let out_base = train(&config_base, &tr2, &te2, None).unwrap();
    println!("(0.2-200) PMN: acc {:.4} r_rps {:.4} | baseline: acc {:.4} r_rps {:.4}",
        out_pmn.log.last().unwrap().test_acc, out_pmn.log.last().unwrap().r_rps,
        out_base.log.last().unwrap().test_acc, out_base.log.last().unwrap().r_rps);
}
