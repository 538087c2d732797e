//! Turns a detection into grid bins, an augmented caption and a loss weight map.

use geomlab::geometry::{augment_caption, box_to_bins, weight_map_from_boxes, BinGrid, Detection, WeightMode};
use geomlab::vocab::Vocab;

fn main() -> geomlab::Result<()> {
    let grid = BinGrid::square(256, 32)?;
    let det = Detection::new(0.9, 40.0, 60.0, 100.0, 130.0);
    let bins = box_to_bins(&det, &grid)?;
    println!("box (40,60)-(100,130) on 32px bins -> ({},{})-({},{}), {} cells", bins.a1, bins.b1, bins.a2, bins.b2, bins.count());

    let vocab = Vocab::full(&grid);
    let caption = vocab.encode("a dark circle on plain")?;
    let aug = augment_caption(&caption, &[det], "watermark", 0.5, &grid, &vocab)?;
    println!("caption: {}", vocab.decode(&aug.tokens)?);

    for mode in [WeightMode::Intent, WeightMode::Literal] {
        let map = weight_map_from_boxes(&grid, &[bins], &[det.p], 0.25, mode)?;
        println!(
            "{mode}: inside {:.4}, outside {:.4}, sum {:.1} over {} bins",
            map.get(bins.a1, bins.b1),
            map.get(0, 0),
            map.sum(),
            grid.total()
        );
    }
    Ok(())
}
