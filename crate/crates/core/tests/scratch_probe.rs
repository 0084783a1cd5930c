use osn_core::model::BlockConfig;
use osn_core::verify::toytrain::{default_block, default_task, toy_train, TrainConfig};

#[test]
#[ignore]
fn probe_toy_train() {
    let task = default_task(42);
    let config = default_block();
    let train = TrainConfig {
        steps: 500,
        seed: 42,
        ..TrainConfig::default()
    };
    let t0 = std::time::Instant::now();
    let outcome = toy_train(&task, &config, &train, None).unwrap();
    println!("elapsed: {:?}", t0.elapsed());
    println!("diverged: {}", outcome.diverged);
    println!("init_loss: {:.4} final_loss: {:.4}", outcome.init_loss, outcome.final_loss);
    println!("init_rho: {:?} final_rho: {:?}", outcome.init_rho, outcome.final_rho);
    for row in &outcome.log {
        println!(
            "step {:4}  loss {:.4}  rho {:?}  nz {:?}",
            row.step, row.loss, row.rho, row.nonzero_fraction
        );
    }

    for lr in [0.05, 0.1, 0.2, 0.3] {
        let mut tf = BlockConfig::transformer(32, 2);
        tf.dropout_p = 0.0;
        let tr = TrainConfig { steps: 500, seed: 42, lr, ..TrainConfig::default() };
        let control = toy_train(&task, &tf, &tr, None).unwrap();
        println!(
            "baseline lr={}: init {:.4} final {:.4} diverged {}",
            lr, control.init_loss, control.final_loss, control.diverged
        );
    }
}
