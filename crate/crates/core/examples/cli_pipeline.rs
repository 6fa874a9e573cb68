//! Drive the command layer end to end in a scratch directory.

use decidenet::cli::run;

fn main() -> decidenet::Result<()> {
    let root = std::env::temp_dir().join("decidenet-cli");
    let data = root.join("data");
    let runs = root.join("runs");
    let common = |cmd: &str| {
        vec![
            "decidenet".to_string(),
            cmd.to_string(),
            "--data_dir".into(),
            data.display().to_string(),
            "--out_dir".into(),
            runs.display().to_string(),
            "--dataset.train".into(),
            "8".into(),
            "--dataset.val".into(),
            "3".into(),
            "--dataset.test".into(),
            "4".into(),
            "--train.total_steps".into(),
            "40".into(),
            "--train.eval_interval".into(),
            "20".into(),
            "--train.attention_stride".into(),
            "4".into(),
        ]
    };
    for cmd in ["synth", "train", "eval", "trends", "ablate"] {
        println!("== {cmd}");
        print!("{}", run(common(cmd))?);
    }
    println!("outputs under {}", root.display());
    Ok(())
}
