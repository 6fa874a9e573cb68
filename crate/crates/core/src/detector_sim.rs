//! Synthetic head detector whose recall and confidence fall with local crowding,
//! plus the plain-text detections format.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::density::{DensityMap, Detection, DetectionSet, PointSet};
use crate::error::{Error, Result};

/// Side of the square window used to measure local density around a head.
pub const DENSITY_WINDOW: usize = 33;
/// Lower clamp for per-head recall and score.
pub const PROBABILITY_FLOOR: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorProfile {
    pub base_recall: f64,
    /// Recall lost per person of local density.
    pub recall_decay: f64,
    pub base_score: f64,
    pub score_decay: f64,
    /// Standard deviation of the additive score noise.
    pub score_noise: f64,
    pub position_jitter_sigma: f64,
    /// `(width, height)` in pixels.
    pub box_size: (f64, f64),
    /// Expected spurious detections per scene.
    pub false_positive_rate: f64,
    pub seed: u64,
}

impl Default for DetectorProfile {
    fn default() -> Self {
        DetectorProfile {
            base_recall: 1.0,
            recall_decay: 0.045,
            base_score: 0.95,
            score_decay: 0.05,
            score_noise: 0.03,
            position_jitter_sigma: 1.0,
            box_size: (12.0, 12.0),
            false_positive_rate: 0.0,
            seed: 0,
        }
    }
}

impl DetectorProfile {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")))
            }
        };
        let nonneg = |name: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")))
            }
        };
        unit("base_recall", self.base_recall)?;
        unit("base_score", self.base_score)?;
        nonneg("recall_decay", self.recall_decay)?;
        nonneg("score_decay", self.score_decay)?;
        nonneg("score_noise", self.score_noise)?;
        nonneg("position_jitter_sigma", self.position_jitter_sigma)?;
        nonneg("false_positive_rate", self.false_positive_rate)?;
        if !(self.box_size.0 > 0.0 && self.box_size.1 > 0.0 && self.box_size.0.is_finite() && self.box_size.1.is_finite()) {
            return Err(Error::Config(format!("box_size must be positive, got {:?}", self.box_size)));
        }
        Ok(())
    }

    /// Same profile with a seed decorrelated per scene.
    pub fn for_scene(&self, scene_index: u64) -> DetectorProfile {
        DetectorProfile {
            seed: splitmix(self.seed ^ splitmix(scene_index.wrapping_add(0x5eed))),
            ..self.clone()
        }
    }

    pub fn recall_at(&self, rho: f64) -> f64 {
        (self.base_recall - self.recall_decay * rho).clamp(PROBABILITY_FLOOR, 1.0)
    }

    pub fn score_at(&self, rho: f64) -> f64 {
        (self.base_score - self.score_decay * rho).clamp(PROBABILITY_FLOOR, 1.0)
    }
}

pub(crate) fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Summed-area table with a zero top row and left column.
struct Integral {
    w: usize,
    sums: Vec<f64>,
}

impl Integral {
    fn new(map: &DensityMap) -> Self {
        let (h, w) = map.extent();
        let mut sums = vec![0.0; (h + 1) * (w + 1)];
        for r in 0..h {
            let mut row = 0.0;
            for c in 0..w {
                row += map.get(r, c);
                sums[(r + 1) * (w + 1) + c + 1] = sums[r * (w + 1) + c + 1] + row;
            }
        }
        Integral { w, sums }
    }

    /// Sum over rows `r0..r1` and cols `c0..c1` (exclusive ends).
    fn window(&self, r0: usize, r1: usize, c0: usize, c1: usize) -> f64 {
        let at = |r: usize, c: usize| self.sums[r * (self.w + 1) + c];
        (at(r1, c1) - at(r0, c1) - at(r1, c0) + at(r0, c0)).max(0.0)
    }
}

/// Mass of `gt_map` in the [`DENSITY_WINDOW`] square centred on each point.
pub fn local_density(points: &PointSet, gt_map: &DensityMap) -> Vec<f64> {
    let extent = gt_map.extent();
    let integral = Integral::new(gt_map);
    let half = DENSITY_WINDOW / 2;
    points
        .iter()
        .map(|p| {
            let cy = p.y.round().clamp(0.0, (extent.0 - 1) as f64) as usize;
            let cx = p.x.round().clamp(0.0, (extent.1 - 1) as f64) as usize;
            integral.window(
                cy.saturating_sub(half),
                (cy + half + 1).min(extent.0),
                cx.saturating_sub(half),
                (cx + half + 1).min(extent.1),
            )
        })
        .collect()
}

pub fn simulate_detections(points: &PointSet, gt_map: &DensityMap, profile: &DetectorProfile) -> Result<DetectionSet> {
    profile.validate()?;
    let (h, w) = gt_map.extent();
    let mut rng = ChaCha8Rng::seed_from_u64(profile.seed);
    let jitter = Normal::new(0.0, profile.position_jitter_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let noise = Normal::new(0.0, profile.score_noise).map_err(|e| Error::Config(e.to_string()))?;
    let (bw, bh) = profile.box_size;
    let clamp_x = |x: f64| x.clamp(0.0, (w - 1) as f64);
    let clamp_y = |y: f64| y.clamp(0.0, (h - 1) as f64);
    let mut dets = Vec::with_capacity(points.len());
    for (p, rho) in points.iter().zip(local_density(points, gt_map)) {
        let keep = rng.gen::<f64>() < profile.recall_at(rho);
        let dx = jitter.sample(&mut rng);
        let dy = jitter.sample(&mut rng);
        let eps = noise.sample(&mut rng);
        if keep {
            dets.push(Detection {
                cx: clamp_x(p.x + dx),
                cy: clamp_y(p.y + dy),
                width: bw,
                height: bh,
                score: (profile.score_at(rho) + eps).clamp(PROBABILITY_FLOOR, 1.0),
            });
        }
    }
    if profile.false_positive_rate > 0.0 {
        let n = rand_distr::Poisson::new(profile.false_positive_rate)
            .map_err(|e| Error::Config(e.to_string()))?
            .sample(&mut rng) as usize;
        for _ in 0..n {
            dets.push(Detection {
                cx: rng.gen_range(0.0..=(w - 1) as f64),
                cy: rng.gen_range(0.0..=(h - 1) as f64),
                width: bw,
                height: bh,
                score: rng.gen_range(PROBABILITY_FLOOR..=0.5),
            });
        }
    }
    Ok(DetectionSet(dets))
}

pub fn parse_detections(text: &str, path: &Path) -> Result<DetectionSet> {
    let mut dets = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(Error::parse(path, i + 1, format!("expected \"cx cy w h score\", got {} fields", fields.len())));
        }
        let mut v = [0.0; 5];
        for (slot, f) in v.iter_mut().zip(&fields) {
            *slot = f
                .parse()
                .map_err(|_| Error::parse(path, i + 1, format!("{f:?} is not a number")))?;
        }
        let d = Detection {
            cx: v[0],
            cy: v[1],
            width: v[2],
            height: v[3],
            score: v[4],
        };
        d.validate().map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        dets.push(d);
    }
    Ok(DetectionSet(dets))
}

pub fn format_detections(dets: &DetectionSet) -> String {
    let mut out = String::from("# cx cy w h score\n");
    for d in dets.iter() {
        writeln!(out, "{} {} {} {} {}", d.cx, d.cy, d.width, d.height, d.score).expect("string write");
    }
    out
}

pub fn load_detections(path: &Path) -> Result<DetectionSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_detections(&text, path)
}

pub fn save_detections(dets: &DetectionSet, path: &Path) -> Result<()> {
    fs::write(path, format_detections(dets)).map_err(|e| Error::io(path, e))
}
