//! The epoch-indexed loss weight and learning-rate schedules.

use asdnb::loss::{alpha_at, total_loss};
use asdnb::train::lr_at;

fn main() -> asdnb::Result<()> {
    println!("epoch  alpha     lr");
    for e in [1, 2, 10, 20, 30, 31, 40] {
        println!("{e:>5}  {:.6}  {:.6e}", alpha_at(e)?, lr_at(e)?);
    }
    let (av, v, y) = ([2.0, -1.0, 0.5], [0.5, 0.5, 0.5], [1, 0, 1]);
    for e in [1, 30, 31] {
        println!("total loss at epoch {e}: {:.6}", total_loss(&av, &v, &y, e)?);
    }
    Ok(())
}
