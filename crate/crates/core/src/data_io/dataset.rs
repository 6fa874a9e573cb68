//! Synthetic train/val/test splits with simulated detections.

use std::path::Path;

use super::generator::{generate_scene, SceneSpec};
use super::scene::{load_scene, save_scene, Scene};
use crate::density::{gt_density, GaussianKernelSpec};
use crate::detector_sim::{simulate_detections, splitmix, DetectorProfile};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Split::Train => 0x7261_696e,
            Split::Val => 0x0076_616c,
            Split::Test => 0x7465_7374,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split {s:?} (train, val, test)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub scene: SceneSpec,
    pub detector: DetectorProfile,
    pub kernel: GaussianKernelSpec,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            scene: SceneSpec::default(),
            detector: DetectorProfile::default(),
            kernel: GaussianKernelSpec::default(),
            train: 200,
            val: 40,
            test: 100,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    pub fn scene_seed(&self, split: Split, index: usize) -> u64 {
        splitmix(self.seed ^ splitmix(split.tag() ^ splitmix(index as u64)))
    }

    /// Scene `index` of `split`, with detections drawn from the detector profile.
    pub fn scene(&self, split: Split, index: usize) -> Result<Scene> {
        let seed = self.scene_seed(split, index);
        let mut scene = generate_scene(&self.scene, seed)?;
        let gt = gt_density(&scene.points, scene.extent(), &self.kernel)?;
        scene.detections = Some(simulate_detections(&scene.points, &gt, &self.detector.for_scene(seed))?);
        Ok(scene)
    }

    pub fn split(&self, split: Split) -> Result<Vec<Scene>> {
        (0..self.size(split)).map(|i| self.scene(split, i)).collect()
    }
}

pub const MANIFEST_FILE: &str = "manifest.txt";
const MANIFEST_HEADER: &str = "# split scene_id gt_count detections";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub split: Split,
    pub id: String,
    pub gt_count: usize,
    pub detections: usize,
}

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    let mut out = format!("{MANIFEST_HEADER}\n");
    for e in entries {
        out.push_str(&format!("{} {} {} {}\n", e.split.name(), e.id, e.gt_count, e.detections));
    }
    out
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |m: String| Error::parse(path, i + 1, m);
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 4 {
            return Err(err(format!("expected 4 fields, found {}", f.len())));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| err(format!("{s:?} is not a count")));
        out.push(ManifestEntry {
            split: f[0].parse().map_err(|_| err(format!("unknown split {:?}", f[0])))?,
            id: f[1].to_string(),
            gt_count: num(f[2])?,
            detections: num(f[3])?,
        });
    }
    Ok(out)
}

/// Writes every split under `dir/<split>/<scene_id>/` plus the manifest.
pub fn write_dataset(spec: &DatasetSpec, dir: &Path) -> Result<Vec<ManifestEntry>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    for split in Split::ALL {
        let sub = dir.join(split.name());
        std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        for i in 0..spec.size(split) {
            let scene = spec.scene(split, i)?;
            save_scene(&scene, &sub.join(&scene.id))?;
            entries.push(ManifestEntry {
                split,
                id: scene.id.clone(),
                gt_count: scene.count(),
                detections: scene.detections.as_ref().map_or(0, |d| d.len()),
            });
        }
    }
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, format_manifest(&entries)).map_err(|e| Error::io(&path, e))?;
    Ok(entries)
}

pub fn load_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    parse_manifest(&text, &path)
}

/// Scenes of one split in manifest order.
pub fn load_split(dir: &Path, split: Split) -> Result<Vec<Scene>> {
    load_manifest(dir)?
        .iter()
        .filter(|e| e.split == split)
        .map(|e| load_scene(&dir.join(split.name()).join(&e.id)))
        .collect()
}
