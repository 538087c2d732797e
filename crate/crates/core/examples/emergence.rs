//! Trains plain-caption baselines at several training ICRs, reports the
//! generated ICR of each, and correlates an untrained concept word in the
//! prompt with detected presence.
//!
//! Usage: `cargo run --release --example emergence [key=value ...]`.

use geomlab::runner::{run_preliminary, with_overrides, Lab, RunConfig};

fn main() -> geomlab::Result<()> {
    env_logger::init();
    let overrides: Vec<String> = std::env::args().skip(1).collect();
    let cfg = with_overrides(&RunConfig::default(), &overrides)?;
    let mut lab = Lab::default();
    let report = run_preliminary(&mut lab, &cfg, 1)?;
    print!("{}", report.to_csv());
    println!("spearman rho {:.3}", report.spearman);
    if let Some(c) = &report.correlation {
        println!(
            "concept word vs presence: r {:.4}, p {:.4} (ICR {:.1}% with word, {:.1}% without)",
            c.r, c.p, c.icr_with_word, c.icr_without_word
        );
    }
    std::fs::write("icr_trend.svg", report.chart().to_svg())?;
    println!("wrote icr_trend.svg");
    Ok(())
}
