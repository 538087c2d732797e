//! Runs one ablation suite and writes its CSV and SVG plot.
//!
//! Usage: `cargo run --release --example ablation <suite> [key=value ...]`
//! where suite is components, bins, reweight, negprompt or geo-accuracy.

use geomlab::eval::to_csv;
use geomlab::runner::{run_ablations, with_overrides, Lab, RunConfig, Suite};

fn main() -> geomlab::Result<()> {
    env_logger::init();
    let mut args = std::env::args().skip(1);
    let suite: Suite = args.next().as_deref().unwrap_or("negprompt").parse()?;
    let overrides: Vec<String> = args.collect();
    let cfg = with_overrides(&RunConfig::default(), &overrides)?;
    let mut lab = Lab::default();
    let report = run_ablations(&mut lab, &cfg, suite)?;
    let csv = to_csv(&report.records());
    print!("{csv}");
    std::fs::write("ablation.csv", csv)?;
    std::fs::write("ablation.svg", report.chart().to_svg())?;
    println!("wrote ablation.csv and ablation.svg");
    Ok(())
}
