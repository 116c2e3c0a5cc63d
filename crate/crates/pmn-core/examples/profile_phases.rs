use pmn_core::loss::{pmn_loss, LossWeights};
use pmn_core::model::Model;
use pmn_core::nn::Adam;
use pmn_core::train::{load_or_generate_data, RunConfig};
use std::time::Instant;

fn main() {
    let config = RunConfig::default();
    let (train_set, test_set) = load_or_generate_data(&config).unwrap();
    let mut model = config.build_model().unwrap();
    let mut adam = Adam::new(0.001, 0.99);

    let idx: Vec<usize> = (0..128).collect();
    let x = train_set.batch_tensor(&idx);
    let labels: Vec<usize> = idx.iter().map(|&i| train_set.labels()[i]).collect();

    if let Model::Pmn(m) = &mut model {
        // Warmup
        pmn_loss(m, &x, &labels, &LossWeights::default(), true).unwrap();

        let t = Instant::now();
        for _ in 0..5 { m.zero_grads(); pmn_loss(m, &x, &labels, &LossWeights::default(), false).unwrap(); }
        println!("fwd only (batch 128) x5: {:.0?} => {:.1?}/batch", t.elapsed(), t.elapsed()/5);

        let t = Instant::now();
        for _ in 0..5 { m.zero_grads(); pmn_loss(m, &x, &labels, &LossWeights::default(), true).unwrap(); }
        println!("fwd+bwd (batch 128) x5: {:.0?} => {:.1?}/batch", t.elapsed(), t.elapsed()/5);

        // AE parts
        let t = Instant::now();
        for _ in 0..5 { m.ae.forward_train(&x).unwrap(); }
        println!("ae fwd_train x5: {:.0?}", t.elapsed());

        let fwd = m.ae.forward_train(&x).unwrap();
        let dz = pmn_core::Tensor::zeros(&[128, 64]);
        let dxh = pmn_core::Tensor::zeros(&[128, 1024]);
        let t = Instant::now();
        for _ in 0..5 { m.ae.backward(&fwd, dz.clone(), dxh.clone()).unwrap(); }
        println!("ae bwd x5: {:.0?}", t.elapsed());
    }

    let t = Instant::now();
    adam.begin_step();
    let mut slot = 0;
    model.visit_params(&mut |p| { adam.update(slot, &p.name, p.value, p.grad, 0).unwrap(); slot += 1; });
    println!("adam step x1: {:.0?} ({} params)", t.elapsed(), slot);

    let tx = test_set.full_tensor();
    let t = Instant::now();
    for _ in 0..5 { model.encode_batch(&tx).unwrap(); }
    println!("test encode (240) x5: {:.0?}", t.elapsed());
}
