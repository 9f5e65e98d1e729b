//! Trains a reduced-width model on synthetic data and reports mAP per epoch.

use asdnb::data::synth::{generate_synthetic, SyntheticSpec};
use asdnb::domain::ModelConfig;
use asdnb::train::{evaluate_clips, TrainConfig, Trainer};

fn main() -> asdnb::Result<()> {
    let epochs: u32 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(3);
    let spec = SyntheticSpec { num_tracks: 6, frames_per_track: 12, frame_size: 32, ..SyntheticSpec::default() };
    let train = generate_synthetic(&spec)?.clips();
    let val = generate_synthetic(&SyntheticSpec { seed: 1000, ..spec })?.clips();
    let model = ModelConfig { frame_size: 32, ..ModelConfig::scaled(4) };
    let mut trainer = Trainer::new(model, TrainConfig { epochs, ..TrainConfig::default() })?;
    for epoch in 1..=epochs {
        let loss = trainer.run_epoch(&train, epoch)?;
        let map = evaluate_clips(trainer.model(), &val)?;
        println!("epoch {epoch}: loss {loss:.4} held-out mAP {map:.4}");
    }
    Ok(())
}
