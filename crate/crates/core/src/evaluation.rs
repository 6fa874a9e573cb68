//! Count metrics, the five-way ablation, and the trend analyses.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::data_io::Scene;
use crate::density::{compensated_sum, GaussianKernelSpec};
use crate::error::{Error, Result};
use crate::networks::{fuse_on_tape, QualityNetParams, RegNetParams, QUALITYNET_PREFIX, REGNET_PREFIX};
use crate::numerics::{Checkpoint, Tape};
use crate::training::{crop_patches, Batch};

/// Checkpoint prefix of the attention head trained with `lambda = 0`.
pub const PLAIN_PREFIX: &str = "qualitynet_plain";
/// RegNet snapshot that goes with the separately selected plain head.
pub const PLAIN_REGNET_PREFIX: &str = "regnet_plain";
pub const THREADS_ENV: &str = "DECIDENET_THREADS";
pub const EVAL_HEADER: &str = "scene_id,gt_count,reg_only,det_only,late_fusion,decidenet_plain,decidenet_quality";

fn check_lengths(preds: &[f64], gts: &[f64]) -> Result<()> {
    if preds.len() != gts.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} ground-truth counts",
            preds.len(),
            gts.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::InvalidArgument("metrics need at least one scene".into()));
    }
    Ok(())
}

pub fn mae(preds: &[f64], gts: &[f64]) -> Result<f64> {
    check_lengths(preds, gts)?;
    let abs: Vec<f64> = preds.iter().zip(gts).map(|(p, g)| (p - g).abs()).collect();
    Ok(compensated_sum(&abs) / preds.len() as f64)
}

/// Root mean squared count error.
pub fn mse(preds: &[f64], gts: &[f64]) -> Result<f64> {
    mean_squared_error(preds, gts, true)
}

/// `rooted = false` gives the plain mean of squared errors.
pub fn mean_squared_error(preds: &[f64], gts: &[f64], rooted: bool) -> Result<f64> {
    check_lengths(preds, gts)?;
    let sq: Vec<f64> = preds.iter().zip(gts).map(|(p, g)| (p - g) * (p - g)).collect();
    let m = compensated_sum(&sq) / preds.len() as f64;
    Ok(if rooted { m.sqrt() } else { m })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    RegOnly,
    DetOnly,
    LateFusion,
    DecidenetPlain,
    DecidenetQuality,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::RegOnly,
        Variant::DetOnly,
        Variant::LateFusion,
        Variant::DecidenetPlain,
        Variant::DecidenetQuality,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::RegOnly => "reg_only",
            Variant::DetOnly => "det_only",
            Variant::LateFusion => "late_fusion",
            Variant::DecidenetPlain => "decidenet_plain",
            Variant::DecidenetQuality => "decidenet_quality",
        }
    }

    fn index(self) -> usize {
        self as usize
    }

    pub fn is_learned(self) -> bool {
        matches!(self, Variant::DecidenetPlain | Variant::DecidenetQuality)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

/// Frozen networks for evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub regnet: RegNetParams,
    pub quality: Option<QualityNetParams>,
    pub plain: Option<QualityNetParams>,
    /// RegNet paired with `plain`; `None` shares `regnet`.
    pub plain_regnet: Option<RegNetParams>,
    pub attention_stride: usize,
}

impl Model {
    pub fn from_checkpoint(ck: &Checkpoint, density_scale: f64, attention_stride: usize) -> Result<Self> {
        let head = |prefix: &str| -> Result<Option<QualityNetParams>> {
            if ck.get(&format!("{prefix}.conv1.w")).is_some() {
                QualityNetParams::from_checkpoint(ck, prefix, density_scale).map(Some)
            } else {
                Ok(None)
            }
        };
        let plain_regnet = if ck.get(&format!("{PLAIN_REGNET_PREFIX}.conv1.w")).is_some() {
            Some(RegNetParams::from_checkpoint(ck, PLAIN_REGNET_PREFIX)?)
        } else {
            None
        };
        Ok(Model {
            regnet: RegNetParams::from_checkpoint(ck, REGNET_PREFIX)?,
            quality: head(QUALITYNET_PREFIX)?,
            plain: head(PLAIN_PREFIX)?,
            plain_regnet,
            attention_stride,
        })
    }

    pub fn supports(&self, variant: Variant) -> bool {
        match variant {
            Variant::DecidenetPlain => self.plain.is_some(),
            Variant::DecidenetQuality => self.quality.is_some(),
            _ => true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecord {
    pub id: String,
    pub gt_count: f64,
    /// Indexed in [`Variant::ALL`] order; `None` when the model lacks that head.
    pub predictions: [Option<f64>; 5],
    /// Scores of the scene's detections, for the score trend.
    pub detection_scores: Vec<f64>,
}

impl SceneRecord {
    pub fn prediction(&self, variant: Variant) -> Option<f64> {
        self.predictions[variant.index()]
    }
}

fn fused_count(head: &QualityNetParams, batch: &Batch, reg: &crate::numerics::Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = head.bind(&mut tape);
    let image = tape.constant(batch.image_k.shape().to_vec(), batch.image_k.values().to_vec())?;
    let det = tape.constant(batch.det_k.shape().to_vec(), batch.det_k.values().to_vec())?;
    let reg = tape.constant(reg.shape().to_vec(), reg.values().to_vec())?;
    let f = fuse_on_tape(&mut tape, head, &bound, image, det, reg)?;
    Ok(compensated_sum(tape.value(f.blended)))
}

pub fn evaluate_scene(
    model: &Model,
    scene: &Scene,
    grid: (usize, usize),
    kernel: &GaussianKernelSpec,
    score_default: f64,
) -> Result<SceneRecord> {
    let patches = crop_patches(scene, grid, kernel, score_default)?;
    let batch = Batch::new(&patches, model.attention_stride, false)?;
    let reg_low = model.regnet.predict(&batch.image)?;
    let reg = compensated_sum(reg_low.values());
    let det = compensated_sum(&patches.iter().map(|p| p.det.count()).collect::<Vec<_>>());
    let plain = match &model.plain {
        Some(head) => Some(match &model.plain_regnet {
            Some(r) => fused_count(head, &batch, &r.predict(&batch.image)?)?,
            None => fused_count(head, &batch, &reg_low)?,
        }),
        None => None,
    };
    let quality = match &model.quality {
        Some(head) => Some(fused_count(head, &batch, &reg_low)?),
        None => None,
    };
    Ok(SceneRecord {
        id: scene.id.clone(),
        gt_count: scene.count() as f64,
        predictions: [Some(reg), Some(det), Some(0.5 * (reg + det)), plain, quality],
        detection_scores: scene.detections.iter().flat_map(|d| d.iter()).map(|d| d.score).collect(),
    })
}

/// Runs `f` on a pool capped by `DECIDENET_THREADS` when that is set.
pub fn with_eval_pool<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    let cap = match std::env::var(THREADS_ENV) {
        Ok(s) if !s.trim().is_empty() => match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Some(n),
            _ => return Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got {s:?}"))),
        },
        _ => None,
    };
    match cap {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("cannot start {n} evaluation threads: {e}")))?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

/// Per-scene records in input order; scenes are processed in parallel.
pub fn evaluate_model(
    model: &Model,
    scenes: &[Scene],
    grid: (usize, usize),
    kernel: &GaussianKernelSpec,
    score_default: f64,
) -> Result<Vec<SceneRecord>> {
    with_eval_pool(|| {
        scenes
            .par_iter()
            .map(|s| evaluate_scene(model, s, grid, kernel, score_default))
            .collect::<Result<Vec<_>>>()
    })?
}

/// Predicted counts of one variant, one per scene.
pub fn evaluate_variant(
    variant: Variant,
    model: &Model,
    scenes: &[Scene],
    grid: (usize, usize),
    kernel: &GaussianKernelSpec,
    score_default: f64,
) -> Result<Vec<f64>> {
    if !model.supports(variant) {
        return Err(Error::Missing(format!("checkpoint has no trained head for {variant}")));
    }
    let records = evaluate_model(model, scenes, grid, kernel, score_default)?;
    Ok(records.iter().map(|r| r.prediction(variant).expect("supported variant")).collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggregate {
    pub variant: Variant,
    pub mae: f64,
    pub mse: f64,
}

/// Mean signed error (prediction minus truth) per variant over one group of scenes.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupError {
    pub gt_min: f64,
    pub gt_max: f64,
    pub scenes: usize,
    pub signed_error: [Option<f64>; 5],
}

impl GroupError {
    pub fn signed(&self, variant: Variant) -> Option<f64> {
        self.signed_error[variant.index()]
    }
}

/// Splits `0..values.len()` (sorted by value) into at most `k` groups of
/// near-equal size without separating equal values.
pub fn population_bins(values: &[f64], k: usize) -> Vec<Vec<usize>> {
    let n = values.len();
    if n == 0 || k == 0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut bins = Vec::new();
    let mut start = 0;
    for j in 1..=k {
        let mut end = (j * n / k).max(start);
        while end > start && end < n && values[order[end]] == values[order[end - 1]] {
            end += 1;
        }
        if end > start {
            bins.push(order[start..end].to_vec());
            start = end;
        }
    }
    bins
}

fn group_error(records: &[SceneRecord], members: &[usize]) -> GroupError {
    let gts: Vec<f64> = members.iter().map(|&i| records[i].gt_count).collect();
    let mut signed_error = [None; 5];
    for v in Variant::ALL {
        let errs: Option<Vec<f64>> = members
            .iter()
            .map(|&i| records[i].prediction(v).map(|p| p - records[i].gt_count))
            .collect();
        signed_error[v.index()] = errs.map(|e| compensated_sum(&e) / e.len() as f64);
    }
    GroupError {
        gt_min: gts.iter().copied().fold(f64::INFINITY, f64::min),
        gt_max: gts.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        scenes: members.len(),
        signed_error,
    }
}

/// Signed error per GT-count tercile, lowest first.
pub fn tercile_errors(records: &[SceneRecord]) -> Vec<GroupError> {
    let gts: Vec<f64> = records.iter().map(|r| r.gt_count).collect();
    population_bins(&gts, 3).iter().map(|m| group_error(records, m)).collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub records: Vec<SceneRecord>,
    pub aggregates: Vec<Aggregate>,
    pub terciles: Vec<GroupError>,
    /// Whether `Aggregate::mse` is the root form.
    pub rooted_mse: bool,
}

impl EvalReport {
    pub fn new(records: Vec<SceneRecord>) -> Result<Self> {
        Self::with_mse_form(records, true)
    }

    pub fn with_mse_form(records: Vec<SceneRecord>, rooted_mse: bool) -> Result<Self> {
        let gts: Vec<f64> = records.iter().map(|r| r.gt_count).collect();
        let mut aggregates = Vec::new();
        for v in Variant::ALL {
            if let Some(p) = records.iter().map(|r| r.prediction(v)).collect::<Option<Vec<f64>>>() {
                aggregates.push(Aggregate {
                    variant: v,
                    mae: mae(&p, &gts)?,
                    mse: mean_squared_error(&p, &gts, rooted_mse)?,
                });
            }
        }
        let terciles = tercile_errors(&records);
        Ok(EvalReport {
            records,
            aggregates,
            terciles,
            rooted_mse,
        })
    }

    pub fn aggregate(&self, variant: Variant) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.variant == variant)
    }

    pub fn per_scene_csv(&self) -> String {
        let mut out = format!("{EVAL_HEADER}\n");
        for r in &self.records {
            let _ = write!(out, "{},{}", r.id, r.gt_count);
            for p in r.predictions {
                let _ = write!(out, ",{}", fmt_opt(p));
            }
            out.push('\n');
        }
        out
    }

    /// One `variant,mae,mse` row per evaluated variant.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("variant,mae,mse\n");
        for a in &self.aggregates {
            let _ = writeln!(out, "{},{},{}", a.variant, a.mae, a.mse);
        }
        out
    }

    pub fn tercile_csv(&self) -> String {
        groups_csv("tercile", &self.terciles)
    }

    /// Writes `per_scene.csv`, `summary.csv` and `terciles.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_file(&dir.join("per_scene.csv"), &self.per_scene_csv())?;
        write_file(&dir.join("summary.csv"), &self.summary_csv())?;
        write_file(&dir.join("terciles.csv"), &self.tercile_csv())
    }
}

fn groups_csv(label: &str, groups: &[GroupError]) -> String {
    let mut out = format!("{label},gt_min,gt_max,scenes");
    for v in Variant::ALL {
        let _ = write!(out, ",{v}");
    }
    out.push('\n');
    for (i, g) in groups.iter().enumerate() {
        let _ = write!(out, "{i},{},{},{}", g.gt_min, g.gt_max, g.scenes);
        for e in g.signed_error {
            let _ = write!(out, ",{}", fmt_opt(e));
        }
        out.push('\n');
    }
    out
}

pub(crate) fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

pub const TREND_BINS: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreBin {
    pub gt_min: f64,
    pub gt_max: f64,
    pub scenes: usize,
    pub detections: usize,
    /// Median over every detection in the bin's scenes.
    pub median_score: Option<f64>,
    pub errors: GroupError,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrendReport {
    pub bins: Vec<ScoreBin>,
    pub terciles: Vec<GroupError>,
    /// `(gt, predicted)` per scene, per variant in [`Variant::ALL`] order.
    pub scatter: Vec<(Variant, Vec<(f64, f64)>)>,
}

pub fn trend_report(records: &[SceneRecord]) -> TrendReport {
    let gts: Vec<f64> = records.iter().map(|r| r.gt_count).collect();
    let bins = population_bins(&gts, TREND_BINS)
        .into_iter()
        .map(|members| {
            let scores: Vec<f64> = members.iter().flat_map(|&i| records[i].detection_scores.iter().copied()).collect();
            let errors = group_error(records, &members);
            ScoreBin {
                gt_min: errors.gt_min,
                gt_max: errors.gt_max,
                scenes: members.len(),
                detections: scores.len(),
                median_score: median(&scores),
                errors,
            }
        })
        .collect();
    let scatter = Variant::ALL
        .into_iter()
        .filter_map(|v| {
            let pts: Option<Vec<(f64, f64)>> = records.iter().map(|r| r.prediction(v).map(|p| (r.gt_count, p))).collect();
            pts.map(|p| (v, p))
        })
        .collect();
    TrendReport {
        bins,
        terciles: tercile_errors(records),
        scatter,
    }
}

const COLORS: [&str; 5] = ["#d62728", "#1f77b4", "#7f7f7f", "#ff7f0e", "#2ca02c"];

struct Frame {
    size: f64,
    margin: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Frame {
    fn x(&self, v: f64) -> f64 {
        self.margin + v / self.x_max * (self.size - 2.0 * self.margin)
    }

    fn y(&self, v: f64) -> f64 {
        self.size - self.margin - (v - self.y_min) / (self.y_max - self.y_min) * (self.size - 2.0 * self.margin)
    }

    fn open(&self, out: &mut String, title: &str, x_label: &str, y_label: &str) {
        let (s, m) = (self.size, self.margin);
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{s}" height="{s}" viewBox="0 0 {s} {s}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(out, r#"<rect width="{s}" height="{s}" fill="white"/>"#);
        let _ = writeln!(out, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{title}</text>"#, s / 2.0);
        let _ = writeln!(
            out,
            r#"<path d="M{m} {m} V{b} H{r}" fill="none" stroke="black"/>"#,
            b = s - m,
            r = s - m
        );
        let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{x_label}</text>"#, s / 2.0, s - 12.0);
        let _ = writeln!(
            out,
            r#"<text x="14" y="{y}" text-anchor="middle" transform="rotate(-90 14 {y})">{y_label}</text>"#,
            y = s / 2.0
        );
        for (v, anchor, x, y) in [
            (0.0, "middle", self.x(0.0), s - m + 14.0),
            (self.x_max, "middle", self.x(self.x_max), s - m + 14.0),
            (self.y_min, "end", m - 4.0, self.y(self.y_min) + 4.0),
            (self.y_max, "end", m - 4.0, self.y(self.y_max) + 4.0),
        ] {
            let _ = writeln!(out, r#"<text x="{x:.1}" y="{y:.1}" text-anchor="{anchor}">{}</text>"#, tick(v));
        }
    }
}

fn tick(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{v}")
    } else {
        format!("{v:.2}")
    }
}

impl TrendReport {
    pub fn bins_csv(&self) -> String {
        let mut out = String::from("bin,gt_min,gt_max,scenes,detections,median_score");
        for v in Variant::ALL {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
        for (i, b) in self.bins.iter().enumerate() {
            let _ = write!(
                out,
                "{i},{},{},{},{},{}",
                b.gt_min,
                b.gt_max,
                b.scenes,
                b.detections,
                fmt_opt(b.median_score)
            );
            for e in b.errors.signed_error {
                let _ = write!(out, ",{}", fmt_opt(e));
            }
            out.push('\n');
        }
        out
    }

    pub fn scatter_csv(&self) -> String {
        let mut out = String::from("variant,gt_count,predicted\n");
        for (v, pts) in &self.scatter {
            for (g, p) in pts {
                let _ = writeln!(out, "{v},{g},{p}");
            }
        }
        out
    }

    pub fn tercile_csv(&self) -> String {
        groups_csv("tercile", &self.terciles)
    }

    /// Predicted versus true count, one colour per variant, with the identity line.
    pub fn scatter_svg(&self) -> String {
        let top = self
            .scatter
            .iter()
            .flat_map(|(_, p)| p.iter().flat_map(|&(g, q)| [g, q]))
            .fold(1.0f64, f64::max)
            .ceil();
        let f = Frame {
            size: 480.0,
            margin: 48.0,
            x_max: top,
            y_min: 0.0,
            y_max: top,
        };
        let mut out = String::new();
        f.open(&mut out, "predicted vs true count", "true count", "predicted count");
        let _ = writeln!(
            out,
            r##"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#bbb" stroke-dasharray="4 3"/>"##,
            f.x(0.0),
            f.y(0.0),
            f.x(top),
            f.y(top)
        );
        for (k, (v, pts)) in self.scatter.iter().enumerate() {
            let color = COLORS[v.index()];
            let _ = writeln!(out, r#"<g fill="{color}" fill-opacity="0.6">"#);
            for &(g, p) in pts {
                let _ = writeln!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="2.2"/>"#, f.x(g), f.y(p.max(0.0)));
            }
            out.push_str("</g>\n");
            let ly = f.margin + 14.0 * k as f64;
            let _ = writeln!(
                out,
                r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/><text x="{:.1}" y="{:.1}">{v}</text>"#,
                f.margin + 10.0,
                ly,
                f.margin + 18.0,
                ly + 4.0
            );
        }
        out.push_str("</svg>\n");
        out
    }

    /// Median detection score against the mean true count of each bin.
    pub fn score_svg(&self) -> String {
        let pts: Vec<(f64, f64)> = self
            .bins
            .iter()
            .filter_map(|b| b.median_score.map(|s| (0.5 * (b.gt_min + b.gt_max), s)))
            .collect();
        let f = Frame {
            size: 480.0,
            margin: 48.0,
            x_max: self.bins.iter().map(|b| b.gt_max).fold(1.0f64, f64::max).ceil(),
            y_min: 0.0,
            y_max: 1.0,
        };
        let mut out = String::new();
        f.open(&mut out, "median detection score per count bin", "true count", "median score");
        if !pts.is_empty() {
            let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", f.x(x), f.y(y))).collect();
            let _ = writeln!(
                out,
                r##"<polyline points="{}" fill="none" stroke="#1f77b4" stroke-width="1.5"/>"##,
                path.join(" ")
            );
            for &(x, y) in &pts {
                let _ = writeln!(out, r##"<circle cx="{:.2}" cy="{:.2}" r="3" fill="#1f77b4"/>"##, f.x(x), f.y(y));
            }
        }
        out.push_str("</svg>\n");
        out
    }

    /// Writes the CSV tables and both plots into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_file(&dir.join("score_bins.csv"), &self.bins_csv())?;
        write_file(&dir.join("scatter.csv"), &self.scatter_csv())?;
        write_file(&dir.join("terciles.csv"), &self.tercile_csv())?;
        write_file(&dir.join("scatter.svg"), &self.scatter_svg())?;
        write_file(&dir.join("score_trend.svg"), &self.score_svg())
    }
}
