//! Generates a small synthetic dataset, saves it and loads it back.

use asdnb::data::dataset::{load_dataset, save_dataset};
use asdnb::data::synth::{generate_synthetic, SignalChannel, SyntheticSpec};

fn main() -> asdnb::Result<()> {
    let spec = SyntheticSpec {
        num_tracks: 4,
        frames_per_track: 10,
        frame_size: 32,
        signal_channel: SignalChannel::Body,
        ..SyntheticSpec::default()
    };
    let ds = generate_synthetic(&spec)?;
    let dir = std::env::temp_dir().join(format!("asdnb-synth-{}", std::process::id()));
    save_dataset(&ds, &dir)?;
    let back = load_dataset(&dir)?;
    for t in &back.tracks {
        let labels: String = t.clip.labels.iter().map(|&l| if l == 1 { '#' } else { '.' }).collect();
        println!("{:<10} {}", t.clip.track_id, labels);
    }
    println!("round trip identical: {}", back.tracks.len() == ds.tracks.len() && back.clips() == ds.clips());
    std::fs::remove_dir_all(&dir).ok();
    Ok(())
}
