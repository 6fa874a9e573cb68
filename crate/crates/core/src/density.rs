//! Closed-form density-map math: Gaussian head maps, detection maps, score
//! maps, counting, and count-conserving resampling.
//!
//! Pixel convention: pixel `(row, col)` has its center at `(x = col, y = row)`,
//! so a point maps to the pixel at its rounded coordinates.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::kernels;

pub const DMAP_MAGIC: &str = "DMAP1";

/// `(height, width)` in pixels.
pub type Extent = (usize, usize);

/// Non-negative per-pixel person densities; the sum is a crowd count.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl DensityMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::shape(
                "density map",
                format!("{height}x{width} map cannot hold {} values", values.len()),
            ));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidArgument(format!("density values must be finite and >= 0, found {bad}")));
        }
        Ok(DensityMap { height, width, values })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        DensityMap {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn extent(&self) -> Extent {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn count(&self) -> f64 {
        count(self)
    }

    /// Copies the `h x w` window whose top-left pixel is `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, h: usize, w: usize) -> DensityMap {
        assert!(row + h <= self.height && col + w <= self.width);
        let values = (row..row + h)
            .flat_map(|r| self.values[r * self.width + col..r * self.width + col + w].iter().copied())
            .collect();
        DensityMap { height: h, width: w, values }
    }

    pub fn flipped(&self, horizontal: bool, vertical: bool) -> DensityMap {
        DensityMap {
            height: self.height,
            width: self.width,
            values: flip_plane(&self.values, self.height, self.width, horizontal, vertical),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("{DMAP_MAGIC}\n{} {}\n", self.height, self.width).into_bytes();
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |message: String| Error::Format {
            path: path.into(),
            message,
        };
        let mut lines = bytes.splitn(3, |&b| b == b'\n');
        if lines.next() != Some(DMAP_MAGIC.as_bytes()) {
            return Err(bad(format!("missing {DMAP_MAGIC} magic line")));
        }
        let header = String::from_utf8_lossy(lines.next().ok_or_else(|| bad("missing size line".into()))?).into_owned();
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| bad(format!("bad size line {header:?}: {e}")))?;
        let [h, w] = dims[..] else {
            return Err(bad(format!("size line must be \"H W\", got {header:?}")));
        };
        let body = lines.next().unwrap_or(&[]);
        if body.len() != h * w * 8 {
            return Err(bad(format!("expected {} value bytes, found {}", h * w * 8, body.len())));
        }
        let values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        DensityMap::new(h, w, values).map_err(|e| bad(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

pub(crate) fn flip_plane(values: &[f64], h: usize, w: usize, horizontal: bool, vertical: bool) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    for r in 0..h {
        let sr = if vertical { h - 1 - r } else { r };
        for c in 0..w {
            let sc = if horizontal { w - 1 - c } else { c };
            out[r * w + c] = values[sr * w + sc];
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    /// `(row, col)` of the pixel containing the point, if inside `extent`.
    pub fn pixel(&self, (h, w): Extent) -> Option<(usize, usize)> {
        let (r, c) = (self.y.round(), self.x.round());
        (r >= 0.0 && c >= 0.0 && (r as usize) < h && (c as usize) < w).then_some((r as usize, c as usize))
    }
}

/// Annotated head positions in pixel units, origin top-left.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointSet(pub Vec<Point>);

impl PointSet {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Point> {
        self.0.iter()
    }

    /// Index of the first point outside `[0, W-1] x [0, H-1]`.
    pub fn first_out_of_bounds(&self, (h, w): Extent) -> Option<usize> {
        self.0.iter().position(|p| {
            !(p.x.is_finite() && p.y.is_finite() && p.x >= 0.0 && p.y >= 0.0 && p.x <= (w - 1) as f64 && p.y <= (h - 1) as f64)
        })
    }
}

impl FromIterator<Point> for PointSet {
    fn from_iter<I: IntoIterator<Item = Point>>(iter: I) -> Self {
        PointSet(iter.into_iter().collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianKernelSpec {
    pub sigma: f64,
    pub window: usize,
    pub normalized: bool,
}

impl Default for GaussianKernelSpec {
    fn default() -> Self {
        GaussianKernelSpec {
            sigma: 4.0,
            window: 15,
            normalized: true,
        }
    }
}

impl GaussianKernelSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::InvalidArgument(format!("kernel sigma must be > 0, got {}", self.sigma)));
        }
        if self.window == 0 || self.window.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("kernel window must be odd and positive, got {}", self.window)));
        }
        Ok(())
    }

    /// Row-major `window x window` weights sampled on the integer grid around the center.
    pub fn weights(&self) -> Result<Vec<f64>> {
        self.validate()?;
        let r = (self.window / 2) as isize;
        let two_s2 = 2.0 * self.sigma * self.sigma;
        let mut k = Vec::with_capacity(self.window * self.window);
        for dy in -r..=r {
            for dx in -r..=r {
                k.push((-((dx * dx + dy * dy) as f64) / two_s2).exp());
            }
        }
        let total: f64 = k.iter().sum();
        let norm = if self.normalized {
            total
        } else {
            two_s2 * std::f64::consts::PI
        };
        k.iter_mut().for_each(|v| *v /= norm);
        Ok(k)
    }
}

/// One head detection. Coordinates follow the point convention.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
    pub score: f64,
}

impl Detection {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::InvalidArgument(format!("detection score {} outside [0, 1]", self.score)));
        }
        if !(self.width > 0.0 && self.height > 0.0) || !self.width.is_finite() || !self.height.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "detection box {}x{} must have positive finite extents",
                self.width, self.height
            )));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(Error::InvalidArgument("detection center must be finite".into()));
        }
        Ok(())
    }

    pub fn center(&self) -> Point {
        Point::new(self.cx, self.cy)
    }

    /// Inclusive `(row0, row1, col0, col1)` of covered pixels, clipped to `extent`.
    pub fn pixel_box(&self, (h, w): Extent) -> Option<(usize, usize, usize, usize)> {
        let c0 = (self.cx - self.width / 2.0).ceil().max(0.0);
        let c1 = (self.cx + self.width / 2.0).floor().min((w - 1) as f64);
        let r0 = (self.cy - self.height / 2.0).ceil().max(0.0);
        let r1 = (self.cy + self.height / 2.0).floor().min((h - 1) as f64);
        (c0 <= c1 && r0 <= r1).then_some((r0 as usize, r1 as usize, c0 as usize, c1 as usize))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DetectionSet(pub Vec<Detection>);

impl DetectionSet {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Detection> {
        self.0.iter()
    }

    pub fn centers(&self) -> PointSet {
        self.0.iter().map(Detection::center).collect()
    }
}

impl FromIterator<Detection> for DetectionSet {
    fn from_iter<I: IntoIterator<Item = Detection>>(iter: I) -> Self {
        DetectionSet(iter.into_iter().collect())
    }
}

/// Per-pixel detection confidence in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl ScoreMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::shape(
                "score map",
                format!("{height}x{width} map cannot hold {} values", values.len()),
            ));
        }
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("score values must lie in [0, 1], found {bad}")));
        }
        Ok(ScoreMap { height, width, values })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn extent(&self) -> Extent {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn crop(&self, row: usize, col: usize, h: usize, w: usize) -> ScoreMap {
        assert!(row + h <= self.height && col + w <= self.width);
        let values = (row..row + h)
            .flat_map(|r| self.values[r * self.width + col..r * self.width + col + w].iter().copied())
            .collect();
        ScoreMap { height: h, width: w, values }
    }

    pub fn flipped(&self, horizontal: bool, vertical: bool) -> ScoreMap {
        ScoreMap {
            height: self.height,
            width: self.width,
            values: flip_plane(&self.values, self.height, self.width, horizontal, vertical),
        }
    }

    /// Mean over non-overlapping `stride x stride` blocks (partial edge blocks included).
    pub fn block_mean(&self, stride: usize) -> ScoreMap {
        if stride <= 1 {
            return self.clone();
        }
        let (oh, ow) = (self.height.div_ceil(stride), self.width.div_ceil(stride));
        let mut values = Vec::with_capacity(oh * ow);
        for br in 0..oh {
            for bc in 0..ow {
                let (mut s, mut n) = (0.0, 0usize);
                for r in br * stride..((br + 1) * stride).min(self.height) {
                    for c in bc * stride..((bc + 1) * stride).min(self.width) {
                        s += self.get(r, c);
                        n += 1;
                    }
                }
                values.push(s / n as f64);
            }
        }
        ScoreMap {
            height: oh,
            width: ow,
            values,
        }
    }
}

fn splat(centers: impl Iterator<Item = Point>, (h, w): Extent, kernel: &GaussianKernelSpec) -> Result<DensityMap> {
    if h == 0 || w == 0 {
        return Err(Error::shape("density", format!("empty extent {h}x{w}")));
    }
    let k = kernel.weights()?;
    let r = (kernel.window / 2) as isize;
    let mut values = vec![0.0; h * w];
    for p in centers {
        let (pr, pc) = (p.y.round() as isize, p.x.round() as isize);
        for dy in -r..=r {
            let row = pr + dy;
            if row < 0 || row >= h as isize {
                continue;
            }
            for dx in -r..=r {
                let col = pc + dx;
                if col < 0 || col >= w as isize {
                    continue;
                }
                values[row as usize * w + col as usize] += k[((dy + r) * (2 * r + 1) + dx + r) as usize];
            }
        }
    }
    Ok(DensityMap {
        height: h,
        width: w,
        values,
    })
}

/// Ground-truth density: one truncated Gaussian per annotated head.
///
/// Kernel mass that falls outside the map is dropped, so heads within half a
/// window of the border contribute less than one person.
pub fn gt_density(points: &PointSet, extent: Extent, kernel: &GaussianKernelSpec) -> Result<DensityMap> {
    splat(points.iter().copied(), extent, kernel)
}

/// Detection density: the same kernel placed at every detection center.
/// Scores do not weight the kernel.
pub fn det_density(dets: &DetectionSet, extent: Extent, kernel: &GaussianKernelSpec) -> Result<DensityMap> {
    splat(dets.iter().map(Detection::center), extent, kernel)
}

/// Pixels inside at least one box take the highest covering score; all others take `default`.
pub fn score_map(dets: &DetectionSet, extent: Extent, default: f64) -> Result<ScoreMap> {
    if !(0.0..=1.0).contains(&default) {
        return Err(Error::InvalidArgument(format!("default score {default} outside [0, 1]")));
    }
    let (h, w) = extent;
    if h == 0 || w == 0 {
        return Err(Error::shape("score_map", format!("empty extent {h}x{w}")));
    }
    let mut best: Vec<Option<f64>> = vec![None; h * w];
    for d in dets.iter() {
        d.validate()?;
        if let Some((r0, r1, c0, c1)) = d.pixel_box(extent) {
            for r in r0..=r1 {
                for slot in &mut best[r * w + c0..=r * w + c1] {
                    *slot = Some(slot.map_or(d.score, |s: f64| s.max(d.score)));
                }
            }
        }
    }
    Ok(ScoreMap {
        height: h,
        width: w,
        values: best.into_iter().map(|s| s.unwrap_or(default)).collect(),
    })
}

/// Exact-as-possible sum of all pixels (compensated summation).
pub fn count(map: &DensityMap) -> f64 {
    compensated_sum(&map.values)
}

/// Neumaier summation.
pub fn compensated_sum(values: &[f64]) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for &v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Corner-aligned bilinear resample to `target`, then a global rescale so the
/// count is unchanged. Works in both directions.
pub fn resize_conserving(map: &DensityMap, target: Extent) -> Result<DensityMap> {
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::shape("resize_conserving", format!("empty target {th}x{tw}")));
    }
    if target == map.extent() {
        return Ok(map.clone());
    }
    let total = count(map);
    if total == 0.0 {
        return Ok(DensityMap::zeros(th, tw));
    }
    let mut values = kernels::bilinear_forward(1, map.extent(), target, &map.values);
    let sampled: f64 = values.iter().sum();
    if sampled > 0.0 {
        let f = total / sampled;
        values.iter_mut().for_each(|v| *v *= f);
    } else {
        // Sparse mass between sample positions: fall back to area assignment.
        values = area_resample(map, target);
    }
    DensityMap::new(th, tw, values)
}

/// Each source pixel's mass goes to the target cell containing its center.
fn area_resample(map: &DensityMap, (th, tw): Extent) -> Vec<f64> {
    let mut out = vec![0.0; th * tw];
    for r in 0..map.height {
        let tr = (r * th / map.height).min(th - 1);
        for c in 0..map.width {
            let tc = (c * tw / map.width).min(tw - 1);
            out[tr * tw + tc] += map.get(r, c);
        }
    }
    out
}
