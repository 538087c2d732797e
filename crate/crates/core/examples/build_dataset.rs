//! Builds a contaminated dataset, writes it to disk and reads it back.
//!
//! Usage: `cargo run --example build_dataset [out_dir] [kind] [icr]`

use geomlab::dataset::{build_dataset, BuildOptions, Manifest};
use geomlab::vocab::ConceptKind;

fn main() -> geomlab::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| "icd-watermark-50".into());
    let kind: ConceptKind = args.next().as_deref().unwrap_or("watermark").parse()?;
    let icr: f64 = args.next().map_or(Ok(0.5), |s| s.parse()).map_err(|_| geomlab::GeomError::InvalidArgument("bad icr".into()))?;

    let manifest = build_dataset(400, icr, kind, 1, BuildOptions { image_size: 32, n_test: 100, ..Default::default() })?;
    manifest.write(&out)?;
    let back = Manifest::read(&out)?;
    assert_eq!(back, manifest);

    println!("{}: {} training images, {} stamped (achieved ICR {:.3})", out, back.header.n, back.header.stamped, back.achieved_icr());
    for s in back.train().filter(|s| !s.boxes.is_empty()).take(3) {
        let b = &s.boxes[0];
        println!("  {} \"{}\" box ({:.0},{:.0})-({:.0},{:.0})", s.id, s.caption, b.a1, b.b1, b.a2, b.b2);
    }
    Ok(())
}
