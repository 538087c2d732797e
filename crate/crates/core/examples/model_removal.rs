//! Learns concept and location tokens for a frozen contaminated model and
//! uses them as negative prompts.
//!
//! Usage: `cargo run --release --example model_removal [key=value ...]`.
//! Set `RUST_LOG=info` for progress.

use geomlab::eval::to_csv;
use geomlab::runner::{run_model_removal, with_overrides, Lab, RunConfig};

fn main() -> geomlab::Result<()> {
    env_logger::init();
    let overrides: Vec<String> = std::env::args().skip(1).collect();
    let cfg = with_overrides(&RunConfig::default(), &overrides)?;
    let mut lab = Lab::default();
    let report = run_model_removal(&mut lab, &cfg)?;
    print!("{}", to_csv(&report.records));
    println!("annotated pool images: {}", report.pool_annotated);
    println!("pre-existing parameters unchanged: {}", report.frozen);
    Ok(())
}
