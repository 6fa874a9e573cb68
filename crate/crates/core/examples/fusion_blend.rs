//! Attention-weighted blending of the two density maps.

use decidenet::data_io::{DatasetSpec, Split};
use decidenet::density::{count, DensityMap, GaussianKernelSpec};
use decidenet::networks::{blend, qualitynet_forward, regnet_forward, AttentionMap, QualityNetConfig, QualityNetParams, RegNetParams};
use decidenet::training::{crop_patches, PIXEL_SCALE, SCORE_DEFAULT};
use rand::SeedableRng;

fn main() -> decidenet::Result<()> {
    let scene = DatasetSpec::default().scene(Split::Test, 3)?;
    let patch = &crop_patches(&scene, (4, 3), &GaussianKernelSpec::default(), SCORE_DEFAULT)?[1];
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
    let regnet = RegNetParams::init(3, &mut rng);
    let head = QualityNetParams::init(&QualityNetConfig::default(), &mut rng)?;

    let pixels = decidenet::numerics::Tensor::from_fn(patch.pixels.shape(), |i| patch.pixels.values()[i] * PIXEL_SCALE);
    let d_reg_low = regnet_forward(&regnet, &pixels)?;
    let d_reg = decidenet::density::resize_conserving(&d_reg_low, patch.extent())?;
    let k = qualitynet_forward(&head, &pixels, &patch.det, &d_reg_low)?;
    let fused = blend(&k, &patch.det, &d_reg)?;
    println!("patch heads {}  det {:.3}  reg {:.3}  fused {:.3}", patch.count(), count(&patch.det), count(&d_reg), count(&fused));

    let (h, w) = patch.extent();
    for (name, kv) in [("K=1", 1.0), ("K=0", 0.0), ("K=0.5", 0.5)] {
        let b = blend(&AttentionMap::filled(h, w, kv)?, &patch.det, &d_reg)?;
        println!("{name:<6} count {:.6}", count(&b));
    }
    let mean = DensityMap::new(h, w, patch.det.values().iter().zip(d_reg.values()).map(|(a, b)| 0.5 * (a + b)).collect())?;
    println!("elementwise mean {:.6}", count(&mean));
    Ok(())
}
