//! Body boxes derived from face boxes, clamped to the frame.

use asdnb::data::annotations::derive_body_box;

fn main() -> asdnb::Result<()> {
    for face in [[10.0, 20.0, 30.0, 60.0], [180.0, 20.0, 200.0, 60.0], [90.0, 150.0, 110.0, 190.0]] {
        println!("face {face:?} -> body {:?}", derive_body_box(&face, 200.0, 200.0)?);
    }
    Ok(())
}
