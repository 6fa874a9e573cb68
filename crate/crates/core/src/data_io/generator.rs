//! Synthetic crowd scenes: shaded head discs over a value-noise background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ppm::Image;
use super::scene::Scene;
use crate::density::{Point, PointSet};
use crate::detector_sim::splitmix;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    Uniform,
    /// Density rises towards the top edge.
    Gradient,
    Clustered,
}

impl std::str::FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Layout::Uniform),
            "gradient" => Ok(Layout::Gradient),
            "clustered" => Ok(Layout::Clustered),
            _ => Err(Error::Config(format!("unknown layout {s:?} (uniform, gradient, clustered)"))),
        }
    }
}

impl std::fmt::Display for Layout {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Layout::Uniform => "uniform",
            Layout::Gradient => "gradient",
            Layout::Clustered => "clustered",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub count_min: usize,
    pub count_max: usize,
    pub layout: Layout,
    pub head_radius: f64,
    /// Fixed background seed; `None` draws one per scene.
    pub texture_seed: Option<u64>,
    /// Upper bound on head-like distractors per scene (uniform draw).
    pub clutter: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            height: 96,
            width: 128,
            count_min: 0,
            count_max: 60,
            layout: Layout::Gradient,
            head_radius: 3.5,
            texture_seed: None,
            clutter: 8,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count_min > self.count_max {
            return Err(Error::Config(format!(
                "count range [{}, {}] is empty",
                self.count_min, self.count_max
            )));
        }
        if self.height < 16 || self.width < 16 {
            return Err(Error::Config(format!("scene {}x{} is below 16x16", self.height, self.width)));
        }
        if !(self.head_radius >= 1.0 && self.head_radius.is_finite()) {
            return Err(Error::Config(format!("head radius must be >= 1, got {}", self.head_radius)));
        }
        Ok(())
    }
}

/// Heads keep this far from the border so their kernels stay inside the image.
const MARGIN: f64 = 7.0;
/// Exponent of the top-heavy row density used by [`Layout::Gradient`].
const GRADIENT_POWER: f64 = 2.0;

fn place(spec: &SceneSpec, n: usize, rng: &mut ChaCha8Rng) -> Vec<Point> {
    let (h, w) = (spec.height as f64, spec.width as f64);
    let pad = MARGIN.min(h / 4.0).min(w / 4.0);
    let (x_lo, x_hi) = (pad, w - 1.0 - pad);
    let (y_lo, y_hi) = (pad, h - 1.0 - pad);
    match spec.layout {
        Layout::Uniform => (0..n)
            .map(|_| Point::new(rng.gen_range(x_lo..=x_hi), rng.gen_range(y_lo..=y_hi)))
            .collect(),
        Layout::Gradient => (0..n)
            .map(|_| {
                // row density proportional to t^p with t = 1 at the top edge
                let t = rng.gen::<f64>().powf(1.0 / (GRADIENT_POWER + 1.0));
                let y = y_hi - t * (y_hi - y_lo);
                Point::new(rng.gen_range(x_lo..=x_hi), y)
            })
            .collect(),
        Layout::Clustered => {
            let k = rng.gen_range(1..=3);
            let centres: Vec<(f64, f64)> =
                (0..k).map(|_| (rng.gen_range(x_lo..=x_hi), rng.gen_range(y_lo..=y_hi))).collect();
            let spread = Normal::new(0.0, (h.min(w) / 8.0).max(2.0)).expect("positive spread");
            (0..n)
                .map(|i| {
                    let (cx, cy) = centres[i % k];
                    Point::new(
                        (cx + spread.sample(rng)).clamp(x_lo, x_hi),
                        (cy + spread.sample(rng)).clamp(y_lo, y_hi),
                    )
                })
                .collect()
        }
    }
}

/// Two-octave value noise in `[0, 1]`.
fn value_noise(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for (cell, weight) in [(24usize, 0.65), (8, 0.35)] {
        let gh = h / cell + 2;
        let gw = w / cell + 2;
        let grid: Vec<f64> = (0..gh * gw).map(|_| rng.gen()).collect();
        for r in 0..h {
            let fy = r as f64 / cell as f64;
            let (y0, ty) = (fy.floor() as usize, smooth(fy.fract()));
            for c in 0..w {
                let fx = c as f64 / cell as f64;
                let (x0, tx) = (fx.floor() as usize, smooth(fx.fract()));
                let g = |y: usize, x: usize| grid[y * gw + x];
                let top = g(y0, x0) * (1.0 - tx) + g(y0, x0 + 1) * tx;
                let bot = g(y0 + 1, x0) * (1.0 - tx) + g(y0 + 1, x0 + 1) * tx;
                out[r * w + c] += weight * (top * (1.0 - ty) + bot * ty);
            }
        }
    }
    out
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

fn to_byte(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn background(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let noise = value_noise(spec.height, spec.width, rng);
    let base = [rng.gen_range(130.0..190.0), rng.gen_range(130.0..190.0), rng.gen_range(120.0..180.0)];
    let amp = rng.gen_range(20.0..40.0);
    noise
        .iter()
        .map(|&n| {
            let d = (n - 0.5) * 2.0 * amp;
            [base[0] + d, base[1] + d, base[2] + d * 0.8]
        })
        .collect()
}

/// Paints a disc darkening towards the rim, with a highlight up-left of centre.
fn paint_disc(canvas: &mut [[f64; 3]], (h, w): (usize, usize), centre: Point, radius: f64, tone: [f64; 3]) {
    let r0 = (centre.y - radius - 1.0).floor().max(0.0) as usize;
    let r1 = ((centre.y + radius + 1.0).ceil() as usize).min(h - 1);
    let c0 = (centre.x - radius - 1.0).floor().max(0.0) as usize;
    let c1 = ((centre.x + radius + 1.0).ceil() as usize).min(w - 1);
    for r in r0..=r1 {
        for c in c0..=c1 {
            let dy = r as f64 - centre.y;
            let dx = c as f64 - centre.x;
            let d = (dx * dx + dy * dy).sqrt() / radius;
            if d > 1.0 {
                continue;
            }
            let hl = (-((dx + 0.35 * radius).powi(2) + (dy + 0.35 * radius).powi(2)) / (0.5 * radius * radius)).exp();
            let shade = 1.0 - 0.45 * d * d + 0.35 * hl;
            let px = &mut canvas[r * w + c];
            for ch in 0..3 {
                px[ch] = tone[ch] * shade;
            }
        }
    }
}

pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(spec.count_min..=spec.count_max);
    let points = place(spec, n, &mut rng);
    let mut tex_rng = ChaCha8Rng::seed_from_u64(match spec.texture_seed {
        Some(s) => s,
        None => splitmix(seed ^ 0x7e57_0000),
    });
    let extent = (spec.height, spec.width);
    let mut canvas = background(spec, &mut tex_rng);
    for _ in 0..tex_rng.gen_range(0..=spec.clutter) {
        let centre = Point::new(
            tex_rng.gen_range(MARGIN..spec.width as f64 - MARGIN),
            tex_rng.gen_range(MARGIN..spec.height as f64 - MARGIN),
        );
        let radius = spec.head_radius * tex_rng.gen_range(0.8..1.25);
        let v = tex_rng.gen_range(30.0..90.0);
        paint_disc(&mut canvas, extent, centre, radius, [v * tex_rng.gen_range(0.9..1.2), v, v * 0.9]);
    }
    // far (top) heads first so nearer ones overlap them
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| points[a].y.total_cmp(&points[b].y));
    for i in order {
        let radius = spec.head_radius * rng.gen_range(0.85..1.15);
        let v = rng.gen_range(25.0..75.0);
        let tone = [v * rng.gen_range(0.9..1.3), v, v * rng.gen_range(0.7..1.0)];
        paint_disc(&mut canvas, extent, points[i], radius, tone);
    }
    let data = canvas.iter().flat_map(|px| px.map(to_byte)).collect();
    let image = Image::new(spec.height, spec.width, data)?;
    Scene::new(format!("scene_{seed:016x}"), image, PointSet(points))
}
