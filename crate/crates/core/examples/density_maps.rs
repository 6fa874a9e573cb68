//! Ground-truth and detection densities, score maps and count-preserving resizing.

use decidenet::data_io::{DatasetSpec, Split};
use decidenet::density::{count, det_density, gt_density, resize_conserving, score_map, GaussianKernelSpec};

fn main() -> decidenet::Result<()> {
    let scene = DatasetSpec::default().scene(Split::Train, 0)?;
    let kernel = GaussianKernelSpec::default();
    let dets = scene.detections.as_ref().expect("synthetic scenes carry detections");

    let gt = gt_density(&scene.points, scene.extent(), &kernel)?;
    let det = det_density(dets, scene.extent(), &kernel)?;
    let score = score_map(dets, scene.extent(), 0.1)?;
    println!("heads {}  count(D_gt) {:.9}", scene.count(), count(&gt));
    println!("detections {}  count(D_det) {:.9}", dets.len(), count(&det));

    for target in [(24, 32), (48, 64), (192, 256)] {
        let r = resize_conserving(&gt, target)?;
        println!("resized to {:?}: count {:.9}", r.extent(), count(&r));
    }
    let mean_score = score.values().iter().sum::<f64>() / score.values().len() as f64;
    println!("mean score-map value {mean_score:.4}");
    Ok(())
}
