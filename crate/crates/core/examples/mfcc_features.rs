//! MFCC extraction and alignment to a 25 fps video clock.

use asdnb::mfcc::{align_audio_to_video, compute_mfcc, frame_count};

fn main() -> asdnb::Result<()> {
    let wave: Vec<f32> = (0..16_000).map(|i| 0.3 * (i as f32 * 2.0 * std::f32::consts::PI * 440.0 / 16_000.0).sin()).collect();
    let m = compute_mfcc(&wave, 16_000)?;
    println!("1 s of a 440 Hz tone -> {} x 13 rows (formula {})", m.len(), frame_count(wave.len()));
    println!("row 0: {:?}", &m.frames[0][..4]);
    let aligned = align_audio_to_video(&m, 25, 25.0)?;
    println!("aligned to 25 video frames -> {} rows", aligned.len());
    Ok(())
}
