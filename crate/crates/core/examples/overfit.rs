use chanest_core::channel::PowerDelayProfile;
use chanest_core::ha02::{Ha02Config, Ha02Params};
use chanest_core::ofdm::FrameConfig;
use chanest_core::training::*;
use std::time::Instant;

fn main() {
    let frame = FrameConfig::default();
    let pdp = PowerDelayProfile::etu();
    let cfg = TrainConfig {
        batch_size: 8,
        lr_drop_every: 0,
        seed: 33,
        ..TrainConfig::default()
    };
    let samples = generate_dataset(32, &cfg, &frame, &pdp);
    let params: Ha02Params<f32> = Ha02Params::init(&Ha02Config::default(), 33);
    let mut trainer = Trainer::new(params);
    let t = Instant::now();
    train(&mut trainer, &samples, &[], &cfg, 200, |s| {
        if s.epoch % 25 == 0 {
            println!("epoch {} train {}", s.epoch, s.train_loss);
        }
    })
    .unwrap();
    println!("final train loss: {} in {:?}", trainer.history.last().unwrap().train_loss, t.elapsed());
}
