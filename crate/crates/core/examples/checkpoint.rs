//! Saves a model with its optimizer state and restores it bit-exactly.

use asdnb::checkpoint::Checkpoint;
use asdnb::domain::ModelConfig;
use asdnb::model::AsdModel;
use candle_core::DType;

fn main() -> asdnb::Result<()> {
    let model = AsdModel::new(ModelConfig { frame_size: 32, ..ModelConfig::scaled(8) }, DType::F32)?;
    let path = std::env::temp_dir().join(format!("asdnb-example-{}.ckpt", std::process::id()));
    Checkpoint::capture(&model, None, 0)?.save(&path)?;
    let loaded = Checkpoint::load(&path)?;
    let restored = loaded.build_model()?;
    println!("{} tensors, {} parameters", loaded.tensors.len(), restored.num_params());
    let same = Checkpoint::capture(&restored, None, 0)?.tensors == loaded.tensors;
    println!("restored tensors identical: {same}");
    std::fs::remove_file(&path).ok();
    Ok(())
}
