//! Seeded clip sampling, geometric augmentation and negative audio mixing.

use asdnb::data::clip::{augment_visual, negative_audio_mix, sample_clip, AugmentationConfig};
use asdnb::data::synth::{generate_synthetic, SyntheticSpec};

fn main() -> asdnb::Result<()> {
    let spec = SyntheticSpec { num_tracks: 2, frames_per_track: 20, frame_size: 32, ..SyntheticSpec::default() };
    let clips = generate_synthetic(&spec)?.clips();
    let cfg = AugmentationConfig { negative_audio_prob: 1.0, ..AugmentationConfig::default() };
    let window = sample_clip(&clips[0], 8, 7)?;
    println!("sampled {} of {} frames", window.num_frames(), clips[0].num_frames());
    let a = augment_visual(&window, &cfg, 7);
    let b = augment_visual(&window, &cfg, 7);
    println!("same seed, same pixels: {}", a.face_frames == b.face_frames);
    let changed = a.face_frames.as_slice().iter().zip(window.face_frames.as_slice()).filter(|(x, y)| x != y).count();
    println!("pixels changed by augmentation: {changed}");
    let mixed = negative_audio_mix(&a, &clips[1].waveform, &cfg, 7);
    println!("labels kept after audio mixing: {}", mixed.labels == a.labels);
    Ok(())
}
