//! Scene directories: `image.ppm`, `points.txt`, optional `detections.txt`
//! and an optional `density.dmap` cache.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::ppm::Image;
use crate::density::{DensityMap, DetectionSet, Point, PointSet};
use crate::detector_sim::{load_detections, save_detections};
use crate::error::{Error, Result};

pub const IMAGE_FILE: &str = "image.ppm";
pub const POINTS_FILE: &str = "points.txt";
pub const DETECTIONS_FILE: &str = "detections.txt";
pub const DENSITY_FILE: &str = "density.dmap";

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: String,
    pub image: Image,
    pub points: PointSet,
    pub detections: Option<DetectionSet>,
    /// Cached ground-truth density; recomputed when absent.
    pub density: Option<DensityMap>,
}

impl Scene {
    pub fn new(id: impl Into<String>, image: Image, points: PointSet) -> Result<Self> {
        if let Some(i) = points.first_out_of_bounds(image.extent()) {
            let p = points.0[i];
            return Err(Error::InvalidArgument(format!(
                "point #{i} ({}, {}) lies outside the {}x{} image",
                p.x,
                p.y,
                image.height(),
                image.width()
            )));
        }
        Ok(Scene {
            id: id.into(),
            image,
            points,
            detections: None,
            density: None,
        })
    }

    pub fn extent(&self) -> (usize, usize) {
        self.image.extent()
    }

    pub fn count(&self) -> usize {
        self.points.len()
    }
}

pub fn parse_points(text: &str, path: &Path) -> Result<PointSet> {
    let mut pts = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [x, y] = fields[..] else {
            return Err(Error::parse(path, i + 1, format!("expected \"x y\", got {} fields", fields.len())));
        };
        let num = |f: &str| {
            f.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::parse(path, i + 1, format!("{f:?} is not a finite number")))
        };
        pts.push(Point::new(num(x)?, num(y)?));
    }
    Ok(PointSet(pts))
}

pub fn format_points(points: &PointSet) -> String {
    let mut out = String::from("# x y\n");
    for p in points.iter() {
        writeln!(out, "{} {}", p.x, p.y).expect("string write");
    }
    out
}

pub fn save_scene(scene: &Scene, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    scene.image.save(&dir.join(IMAGE_FILE))?;
    let points = dir.join(POINTS_FILE);
    fs::write(&points, format_points(&scene.points)).map_err(|e| Error::io(&points, e))?;
    let dets = dir.join(DETECTIONS_FILE);
    match &scene.detections {
        Some(d) => save_detections(d, &dets)?,
        None => remove_if_present(&dets)?,
    }
    let dmap = dir.join(DENSITY_FILE);
    match &scene.density {
        Some(m) => m.save(&dmap)?,
        None => remove_if_present(&dmap)?,
    }
    Ok(())
}

fn remove_if_present(path: &Path) -> Result<()> {
    match fs::remove_file(path) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(Error::io(path, e)),
        _ => Ok(()),
    }
}

/// Loads a scene; its id is the directory name.
pub fn load_scene(dir: &Path) -> Result<Scene> {
    let image_path = dir.join(IMAGE_FILE);
    if !image_path.exists() {
        return Err(Error::Missing(format!("{} not found", image_path.display())));
    }
    let image = Image::load(&image_path)?;
    let points_path = dir.join(POINTS_FILE);
    let text = fs::read_to_string(&points_path).map_err(|e| Error::io(&points_path, e))?;
    let points = parse_points(&text, &points_path)?;
    if let Some(i) = points.first_out_of_bounds(image.extent()) {
        let p = points.0[i];
        return Err(Error::Format {
            path: points_path,
            message: format!(
                "point #{i} ({}, {}) lies outside the {}x{} image",
                p.x,
                p.y,
                image.height(),
                image.width()
            ),
        });
    }
    let id = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut scene = Scene::new(id, image, points)?;
    let dets = dir.join(DETECTIONS_FILE);
    if dets.exists() {
        scene.detections = Some(load_detections(&dets)?);
    }
    let dmap = dir.join(DENSITY_FILE);
    if dmap.exists() {
        let m = DensityMap::load(&dmap)?;
        if m.extent() != scene.extent() {
            return Err(Error::Format {
                path: dmap,
                message: format!("density extent {:?} differs from image {:?}", m.extent(), scene.extent()),
            });
        }
        scene.density = Some(m);
    }
    Ok(scene)
}
