//! Builds a labelled validation set per concept kind and reports template
//! detector precision and recall against the stamped ground truth.
//!
//! Usage: `cargo run --example detector_validation [threshold]`

use geomlab::dataset::{build_dataset, BuildOptions};
use geomlab::detector::{validate_detector, TemplateDetector};
use geomlab::vocab::ConceptKind;

fn main() -> geomlab::Result<()> {
    let tau = match std::env::args().nth(1) {
        Some(arg) => arg.parse().map_err(|_| geomlab::GeomError::InvalidArgument(format!("bad threshold {arg}")))?,
        None => geomlab::detector::DEFAULT_TAU,
    };
    let det = TemplateDetector::all_kinds(32)?.with_tau(tau);
    println!("threshold {tau}");
    for kind in ConceptKind::ALL {
        let data = build_dataset(1000, 0.5, kind, 7, BuildOptions { image_size: 32, n_test: 0, ..Default::default() })?;
        let samples: Vec<_> = data.train().cloned().collect();
        let score = validate_detector(&det, &samples, kind)?;
        let clean_max: Vec<f64> = samples
            .iter()
            .filter(|s| s.boxes.is_empty())
            .map(|s| det.max_score(&s.image, kind).unwrap())
            .collect();
        let worst_clean = clean_max.iter().cloned().fold(-1.0, f64::max);
        println!(
            "{kind:<10} precision {:.3} recall {:.3} (tp {} fp {} fn {}) max clean score {:.3}",
            score.precision(),
            score.recall(),
            score.true_positives,
            score.false_positives,
            score.false_negatives,
            worst_clean
        );
    }
    Ok(())
}
