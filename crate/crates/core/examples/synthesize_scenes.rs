//! Generate a small synthetic dataset with simulated detections and write it to disk.
//!
//! cargo run --example synthesize_scenes -- [output-dir]

use decidenet::data_io::{load_split, write_dataset, DatasetSpec, Layout, Split};

fn main() -> decidenet::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("decidenet-synth"));
    let mut spec = DatasetSpec {
        train: 6,
        val: 2,
        test: 3,
        seed: 11,
        ..DatasetSpec::default()
    };
    spec.scene.layout = Layout::Gradient;
    let entries = write_dataset(&spec, &dir)?;
    println!("wrote {} scenes to {}", entries.len(), dir.display());
    for e in &entries {
        println!("  {:<5} {}  heads {:>2}  detections {:>2}", e.split.name(), e.id, e.gt_count, e.detections);
    }
    let test = load_split(&dir, Split::Test)?;
    let s = &test[0];
    let top = s.points.iter().filter(|p| p.y < s.extent().0 as f64 / 2.0).count();
    println!("{}: {} of {} heads in the upper half", s.id, top, s.count());
    Ok(())
}
