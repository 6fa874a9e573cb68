//! Median simulated detection score per ground-truth-count octile.

use decidenet::data_io::{DatasetSpec, Split};
use decidenet::evaluation::{median, population_bins};

fn main() -> decidenet::Result<()> {
    let spec = DatasetSpec {
        train: 500,
        ..DatasetSpec::default()
    };
    let scenes = spec.split(Split::Train)?;
    let counts: Vec<f64> = scenes.iter().map(|s| s.count() as f64).collect();
    println!("octile  heads      detections  recall  median score");
    for (i, members) in population_bins(&counts, 8).iter().enumerate() {
        let heads: usize = members.iter().map(|&j| scenes[j].count()).sum();
        let scores: Vec<f64> = members
            .iter()
            .flat_map(|&j| scenes[j].detections.iter().flat_map(|d| d.iter()).map(|d| d.score))
            .collect();
        let lo = members.iter().map(|&j| counts[j]).fold(f64::INFINITY, f64::min);
        let hi = members.iter().map(|&j| counts[j]).fold(0.0, f64::max);
        println!(
            "{i}       {lo:>2}-{hi:<2}      {:>5}       {:.3}   {}",
            scores.len(),
            scores.len() as f64 / heads.max(1) as f64,
            median(&scores).map_or("-".into(), |m| format!("{m:.3}"))
        );
    }
    Ok(())
}
