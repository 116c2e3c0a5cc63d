use pmn_core::train::{load_or_generate_data, train, RunConfig};

fn main() {
    let config = RunConfig { epochs: 15, ..RunConfig::default() };
    let t0 = std::time::Instant::now();
    let (train_set, test_set) = load_or_generate_data(&config).unwrap();
    println!("data gen: {:.2?} ({} train / {} test)", t0.elapsed(), train_set.len(), test_set.len());
    let t1 = std::time::Instant::now();
    let outcome = train(&config, &train_set, &test_set, None).unwrap();
    let dt = t1.elapsed();
    println!("15 epochs: {:.2?} => {:.2?}/epoch, est 50 epochs {:.1?}", dt, dt / 15, dt / 15 * 50);
    for e in &outcome.log {
        println!("epoch {}: total {:.4} train_acc {:.3} test_acc {:.3} r_rps {:.3}", e.epoch, e.total, e.train_acc, e.test_acc, e.r_rps);
    }
}
