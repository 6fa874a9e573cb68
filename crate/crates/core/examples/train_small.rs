//! A short training run on a handful of scenes, printing the validation log.
//!
//! cargo run --release --example train_small -- [steps]

use decidenet::data_io::{DatasetSpec, Split};
use decidenet::training::{metrics_csv, train_from, TrainConfig, TrainState};

fn main() -> decidenet::Result<()> {
    let steps = std::env::args().nth(1).map_or(300, |s| s.parse().expect("steps"));
    let data = DatasetSpec {
        train: 20,
        val: 6,
        ..DatasetSpec::default()
    };
    let train = data.split(Split::Train)?;
    let val = data.split(Split::Val)?;
    let config = TrainConfig {
        total_steps: steps,
        eval_interval: 100,
        attention_stride: 4,
        ..TrainConfig::default()
    };
    let start = std::time::Instant::now();
    let out = train_from(TrainState::init(&config)?, &config, &train, &val, |row| {
        eprintln!("step {:>5}  val MAE {:.3}  ({:.1}s)", row.step, row.val_mae, start.elapsed().as_secs_f64())
    })?;
    print!("{}", metrics_csv(&out.metrics));
    println!("best step {} with val MAE {:.3}", out.best_step, out.best_val_mae);
    Ok(())
}
