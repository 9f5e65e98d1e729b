//! One forward pass: visual and audio embeddings and both heads' logits.

use asdnb::data::synth::{generate_synthetic, SyntheticSpec};
use asdnb::domain::ModelConfig;
use asdnb::model::{AsdModel, Batch};
use asdnb::nn::Mode;
use candle_core::DType;

fn main() -> asdnb::Result<()> {
    let spec = SyntheticSpec { num_tracks: 2, frames_per_track: 12, frame_size: 32, ..SyntheticSpec::default() };
    let clips = generate_synthetic(&spec)?.clips();
    let model = AsdModel::new(ModelConfig { frame_size: 32, ..ModelConfig::scaled(4) }, DType::F32)?;
    let (batch, labels) = Batch::from_clips(&clips, DType::F32)?;
    println!("face {:?} body {:?} mfcc {:?}", batch.face.dims(), batch.body.dims(), batch.mfcc.dims());
    let visual = model.encode_visual(&batch, Mode::Eval)?;
    println!("visual embeddings {:?}", visual.dims());
    if let Some(audio) = model.audio_encoder() {
        println!("audio embeddings {:?}", audio.forward_batch(&batch.mfcc, Mode::Eval)?.dims());
    }
    let logits = model.forward(&batch, Mode::Eval)?;
    println!("logits av {:?} visual {:?} labels {:?}", logits.av.dims(), logits.visual.dims(), labels.dims());
    println!("speaking probabilities of track 0: {:.3?}", model.predict_clip(&clips[0])?);
    Ok(())
}
