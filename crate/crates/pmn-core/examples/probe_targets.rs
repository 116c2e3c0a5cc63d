use pmn_core::model::{Model, PmnModel};
use pmn_core::signal::default_fault_specs;
use pmn_core::train::{load_or_generate_data, train, RunConfig};
use pmn_core::Tensor;
use std::path::Path;

#[derive(Clone, Copy, Debug)]
enum Target { Logit, Probability, Margin }

fn gradcam_with_target(m: &PmnModel, sample: &[f64], target: Target) -> Vec<f64> {
    let x = Tensor::from_vec(&[1, 1024], sample.to_vec()).unwrap();
    let (feature_map, z, fc_caches) = m.ae.encode_cached(&x).unwrap();
    let cls = m.classify_latent(z.data()).unwrap();
    let k = cls.predicted;
    let (q, mm) = (m.prototypes.dim, m.prototypes.count);
    let w = m.fc_weight.data();

    // d v_j / d z for every class j.
    let mut dv = vec![vec![0.0; q]; m.class_count];
    for j in 0..mm {
        let (da, _) = m.metric.distance_grads(z.data(), m.prototypes.row(j)).unwrap();
        for c in 0..m.class_count {
            let coeff = w[c * mm + j];
            if coeff != 0.0 {
                for (slot, v) in dv[c].iter_mut().zip(&da) { *slot += coeff * v; }
            }
        }
    }
    let dz: Vec<f64> = match target {
        Target::Logit => dv[k].clone(),
        Target::Probability => {
            let p = &cls.probabilities;
            (0..q).map(|i| {
                p[k] * (0..m.class_count).map(|j| {
                    let delta = if j == k { 1.0 } else { 0.0 };
                    (delta - p[j]) * dv[j][i]
                }).sum::<f64>()
            }).collect()
        }
        Target::Margin => {
            let mut runner = usize::MAX;
            for (j, &l) in cls.logits.iter().enumerate() {
                if j != k && (runner == usize::MAX || l > cls.logits[runner]) { runner = j; }
            }
            (0..q).map(|i| dv[k][i] - dv[runner][i]).collect()
        }
    };
    let dz = Tensor::from_vec(&[1, q], dz).unwrap();
    let d_feature = m.ae.enc_fc.backward_input(dz, &fc_caches).unwrap();
    let (ch, pos) = (feature_map.shape()[1], feature_map.shape()[2]);
    let mut map = vec![0.0; pos];
    for c in 0..ch {
        let g = &d_feature.data()[c * pos..(c + 1) * pos];
        let weight: f64 = g.iter().sum::<f64>() / pos as f64;
        let a = &feature_map.data()[c * pos..(c + 1) * pos];
        for (slot, av) in map.iter_mut().zip(a) { *slot += weight * av; }
    }
    map.iter_mut().for_each(|v| *v = v.max(0.0));
    map
}

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

    for target in [Target::Logit, Target::Probability, Target::Margin] {
        let mut per_class = vec![(0usize, 0usize); 4];
        for sample in &test_set.samples {
            let cls = pmn.classify(&sample.bins).unwrap();
            let y = sample.label as usize;
            if cls.predicted != y { continue; }
            per_class[y].1 += 1;
            let map4 = gradcam_with_target(pmn, &sample.bins, target);
            // Peak quarter determines the hit (knot positions 128+256t ±2
            // after upsampling; equivalent check at map level).
            let peak_quarter = map4.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
            let disc = specs[y].dominant_bin();
            let disc_quarter = (disc + 128) / 256; // quarter whose knot is nearest
            let hit = if map4.iter().all(|&v| v == 0.0) { false }
                else { peak_quarter == disc_quarter.min(3) };
            if hit { per_class[y].0 += 1; }
        }
        let total: (usize, usize) = per_class.iter().fold((0,0), |acc, x| (acc.0+x.0, acc.1+x.1));
        println!("{target:?}: overall {}/{} ({:.1}%), per-class {:?}",
            total.0, total.1, 100.0*total.0 as f64/total.1 as f64, per_class);
    }
}
