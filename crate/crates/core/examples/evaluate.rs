//! Scores a dataset and breaks mAP down by face size, face count and
//! head-body proportion.

use asdnb::cli::predict_dataset;
use asdnb::data::synth::{generate_synthetic, SyntheticSpec};
use asdnb::domain::ModelConfig;
use asdnb::eval::{bucketed_map, write_predictions, Breakdown, BucketSpec, DEFAULT_THRESHOLD};
use asdnb::model::AsdModel;
use candle_core::DType;

fn main() -> asdnb::Result<()> {
    let spec = SyntheticSpec { num_tracks: 8, frames_per_track: 10, frame_size: 32, ..SyntheticSpec::default() };
    let ds = generate_synthetic(&spec)?;
    let model = AsdModel::new(ModelConfig { frame_size: 32, ..ModelConfig::scaled(4) }, DType::F32)?;
    let preds = predict_dataset(&model, &ds)?;
    let mut csv = Vec::new();
    write_predictions(&preds[..3], &mut csv)?;
    print!("{}", String::from_utf8_lossy(&csv));
    let buckets = BucketSpec { frame_width: ds.meta.frame_width, ..BucketSpec::default() };
    let all = [Breakdown::FaceSize, Breakdown::NumFaces, Breakdown::Hbp];
    let report = bucketed_map(&preds, &ds.annotations(), &buckets, &all, DEFAULT_THRESHOLD)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
