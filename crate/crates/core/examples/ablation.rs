//! Train once, then compare all five counting variants and emit the trend plots.
//!
//! cargo run --release --example ablation -- [steps] [output-dir]

use decidenet::data_io::{DatasetSpec, Split};
use decidenet::evaluation::{evaluate_model, trend_report, EvalReport, Model};
use decidenet::training::{train, TrainConfig};

fn main() -> decidenet::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps = args.next().map_or(600, |s| s.parse().expect("steps"));
    let dir = args
        .next()
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("decidenet-ablation"));
    let data = DatasetSpec {
        train: 40,
        val: 10,
        test: 30,
        ..DatasetSpec::default()
    };
    let config = TrainConfig {
        total_steps: steps,
        eval_interval: 200,
        attention_stride: 4,
        ..TrainConfig::default()
    };
    let out = train(&config, &data.split(Split::Train)?, &data.split(Split::Val)?)?;
    let model = Model::from_checkpoint(&out.best, config.qualitynet.density_scale, config.attention_stride)?;
    let test = data.split(Split::Test)?;
    let records = evaluate_model(&model, &test, (config.patch_cols, config.patch_rows), &config.kernel, config.score_default)?;
    let report = EvalReport::new(records.clone())?;
    print!("{}", report.summary_csv());
    print!("{}", report.tercile_csv());
    let trends = trend_report(&records);
    trends.write(&dir)?;
    println!("trend tables and plots in {}", dir.display());
    Ok(())
}
