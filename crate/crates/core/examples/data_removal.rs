//! Baseline vs concept-token-only vs full method on a contaminated dataset,
//! all under shared seeds.
//!
//! Usage: `cargo run --release --example data_removal [key=value ...]`,
//! e.g. `icr=0.5 kind=watermark steps=800`. Set `RUST_LOG=info` for progress.

use geomlab::eval::to_csv;
use geomlab::runner::{run_data_removal, with_overrides, Lab, RunConfig};

fn main() -> geomlab::Result<()> {
    env_logger::init();
    let overrides: Vec<String> = std::env::args().skip(1).collect();
    let cfg = with_overrides(&RunConfig::default(), &overrides)?;
    let mut lab = Lab::default();
    let rows = run_data_removal(&mut lab, &cfg)?;
    print!("{}", to_csv(&rows));
    Ok(())
}
