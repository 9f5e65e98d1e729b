//! Parameter counts of the default model and its ablations.

use asdnb::domain::{ModelConfig, TemporalModel, VisualInputs};
use asdnb::model::AsdModel;
use candle_core::DType;

fn main() -> asdnb::Result<()> {
    let full = AsdModel::new(ModelConfig::default(), DType::F32)?;
    println!("default model: {} parameters", full.num_params());
    for (part, n) in full.param_breakdown() {
        println!("  {part:<12} {n}");
    }
    let variants = [
        ("temporal none", ModelConfig { temporal: TemporalModel::None, ..ModelConfig::default() }),
        ("face only", ModelConfig { visual_inputs: VisualInputs::FaceOnly, ..ModelConfig::default() }),
        ("visual only", ModelConfig { use_audio: false, ..ModelConfig::default() }),
    ];
    for (name, cfg) in variants {
        println!("{name:<14} {}", AsdModel::new(cfg, DType::F32)?.num_params());
    }
    Ok(())
}
