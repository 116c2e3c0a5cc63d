use pmn_core::loss::{pmn_loss, LossWeights};
use pmn_core::model::Model;
use pmn_core::train::{load_or_generate_data, RunConfig};

fn main() {
    let config = RunConfig { epochs: 3, ..RunConfig::default() };
    let (train_set, test_set) = load_or_generate_data(&config).unwrap();
    let outcome = pmn_core::train::train(&config, &train_set, &test_set, None).unwrap();
    let mut model = outcome.final_model;

    // Train-mode predictions on a train batch vs eval-mode on the same batch.
    let idx: Vec<usize> = (0..64).collect();
    let x = train_set.batch_tensor(&idx);
    let labels: Vec<usize> = idx.iter().map(|&i| train_set.labels()[i]).collect();

    if let Model::Pmn(m) = &mut model {
        let out = pmn_loss(m, &x, &labels, &LossWeights::default(), false).unwrap();
        let hits = out.predictions.iter().zip(&labels).filter(|(p, y)| p == y).count();
        println!("train-mode batch acc: {}", hits as f64 / 64.0);
    }
    let preds = model.predict_batch(&x).unwrap();
    let hits = preds.iter().zip(&labels).filter(|(p, y)| p == y).count();
    println!("eval-mode  batch acc: {}", hits as f64 / 64.0);
    println!("eval preds head: {:?}", &preds[..16]);
    println!("true labels head: {:?}", &labels[..16]);

    // Compare latents: train-mode forward vs eval forward for one sample.
    if let Model::Pmn(m) = &mut model {
        let one = train_set.batch_tensor(&[0]);
        let fwd = m.ae.forward_train(&one).unwrap();
        let z_train = fwd.z.data().to_vec();
        let z_eval = m.ae.encode(&one).unwrap().data().to_vec();
        let diff: f64 = z_train.iter().zip(&z_eval).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        println!("max |z_train - z_eval| single sample: {diff:.4}");
        println!("z_train[..6]: {:?}", &z_train[..6]);
        println!("z_eval [..6]: {:?}", &z_eval[..6]);
    }
}
