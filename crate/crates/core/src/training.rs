//! Patch pipeline, the two losses, and the alternating update schedule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data_io::Scene;
use crate::density::{
    det_density, gt_density, resize_conserving, DensityMap, Detection, DetectionSet, GaussianKernelSpec, Point, PointSet,
    ScoreMap,
};
use crate::detector_sim::splitmix;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_model, mae, mse, Model, Variant};
use crate::networks::{fuse_on_tape, QualityNetConfig, QualityNetParams, RegNetParams};
use crate::numerics::{sgd_step, Checkpoint, Tape, Tensor, Var};

/// Pixel bytes are multiplied by this before entering a network.
pub const PIXEL_SCALE: f64 = 1.0 / 255.0;
pub const SCORE_DEFAULT: f64 = 0.1;
pub const STEP_ENTRY: &str = "train.step";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Weight of the attention-to-score regulariser.
    pub lambda: f64,
    pub lr0: f64,
    pub lr_halving_period: u64,
    pub total_steps: u64,
    pub patch_cols: usize,
    pub patch_rows: usize,
    pub flip_prob: f64,
    pub noise_prob: f64,
    /// Additive pixel noise bounds on the 0-255 scale.
    pub noise_range: (f64, f64),
    pub seed: u64,
    pub eval_interval: u64,
    pub qualitynet: QualityNetConfig,
    pub kernel: GaussianKernelSpec,
    pub score_default: f64,
    /// The attention map lives at `patch / attention_stride`.
    pub attention_stride: usize,
    /// Let the quality loss also update RegNet through `D^reg`.
    pub qua_grad_to_reg: bool,
    /// Also train a `lambda = 0` head alongside the main one.
    pub train_plain: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 1.0,
            lr0: 0.005,
            lr_halving_period: 10_000,
            total_steps: 40_000,
            patch_cols: 4,
            patch_rows: 3,
            flip_prob: 0.5,
            noise_prob: 0.5,
            noise_range: (-5.0, 5.0),
            seed: 0,
            eval_interval: 500,
            qualitynet: QualityNetConfig::default(),
            kernel: GaussianKernelSpec::default(),
            score_default: SCORE_DEFAULT,
            attention_stride: 1,
            qua_grad_to_reg: false,
            train_plain: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        for (name, p) in [("flip_prob", self.flip_prob), ("noise_prob", self.noise_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return cfg(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return cfg(format!("lr0 must be > 0, got {}", self.lr0));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return cfg(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if self.lr_halving_period == 0 || self.eval_interval == 0 {
            return cfg("lr_halving_period and eval_interval must be positive".into());
        }
        if self.patch_cols == 0 || self.patch_rows == 0 {
            return cfg("patch grid must be positive".into());
        }
        if !(self.noise_range.0 <= self.noise_range.1) {
            return cfg(format!("noise range {:?} is empty", self.noise_range));
        }
        if !(0.0..=1.0).contains(&self.score_default) {
            return cfg(format!("score_default must lie in [0, 1], got {}", self.score_default));
        }
        if ![1, 2, 4].contains(&self.attention_stride) {
            return cfg(format!("attention_stride must be 1, 2 or 4, got {}", self.attention_stride));
        }
        self.qualitynet.validate()?;
        self.kernel.validate()
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        self.lr0 * 0.5f64.powi((step / self.lr_halving_period) as i32)
    }
}

/// One tile of a scene with everything the losses need at full tile resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSample {
    /// Planar `[3, H, W]` pixels on the 0-255 scale.
    pub pixels: Tensor,
    pub points: PointSet,
    pub detections: DetectionSet,
    pub gt: DensityMap,
    pub det: DensityMap,
    pub score: ScoreMap,
}

impl PatchSample {
    pub fn extent(&self) -> (usize, usize) {
        self.gt.extent()
    }

    pub fn count(&self) -> usize {
        self.points.len()
    }
}

/// Scene-level maps, computed once and cropped so tile masses add up exactly.
fn scene_maps(scene: &Scene, kernel: &GaussianKernelSpec, score_default: f64) -> Result<(DensityMap, DensityMap, ScoreMap)> {
    let dets = scene
        .detections
        .as_ref()
        .ok_or_else(|| Error::Missing(format!("scene {} has no detections", scene.id)))?;
    let gt = match &scene.density {
        Some(m) => m.clone(),
        None => gt_density(&scene.points, scene.extent(), kernel)?,
    };
    let det = det_density(dets, scene.extent(), kernel)?;
    let score = crate::density::score_map(dets, scene.extent(), score_default)?;
    Ok((gt, det, score))
}

/// Row-major tiling into `rows x cols` equal patches; points and detections go
/// to the tile containing their rounded pixel.
pub fn crop_patches(
    scene: &Scene,
    (cols, rows): (usize, usize),
    kernel: &GaussianKernelSpec,
    score_default: f64,
) -> Result<Vec<PatchSample>> {
    let (h, w) = scene.extent();
    if h % rows != 0 || w % cols != 0 {
        return Err(Error::InvalidArgument(format!(
            "scene {} is {h}x{w}, not divisible into {rows} rows and {cols} columns",
            scene.id
        )));
    }
    let (ph, pw) = (h / rows, w / cols);
    let (gt, det, score) = scene_maps(scene, kernel, score_default)?;
    let pixels = scene.image.to_tensor(1.0);
    let tile_of = |p: Point| p.pixel((h, w)).map(|(r, c)| (r / ph, c / pw));
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            let (r0, c0) = (i * ph, j * pw);
            let shift = |p: Point| Point::new(p.x - c0 as f64, p.y - r0 as f64);
            let points = scene.points.iter().filter(|p| tile_of(**p) == Some((i, j))).map(|p| shift(*p)).collect();
            let detections = scene
                .detections
                .iter()
                .flat_map(|d| d.iter())
                .filter(|d| tile_of(d.center()) == Some((i, j)))
                .map(|d| Detection {
                    cx: d.cx - c0 as f64,
                    cy: d.cy - r0 as f64,
                    ..*d
                })
                .collect();
            let tile = Tensor::from_fn(&[3, ph, pw], |k| {
                let (c, rem) = (k / (ph * pw), k % (ph * pw));
                pixels.values()[(c * h + r0 + rem / pw) * w + c0 + rem % pw]
            });
            out.push(PatchSample {
                pixels: tile,
                points,
                detections,
                gt: gt.crop(r0, c0, ph, pw),
                det: det.crop(r0, c0, ph, pw),
                score: score.crop(r0, c0, ph, pw),
            });
        }
    }
    Ok(out)
}

/// Random horizontal/vertical flips applied jointly to every field, then
/// optional per-pixel uniform noise clamped to `[0, 255]`.
pub fn augment<R: Rng + ?Sized>(sample: &PatchSample, config: &TrainConfig, rng: &mut R) -> PatchSample {
    let hflip = rng.gen::<f64>() < config.flip_prob;
    let vflip = rng.gen::<f64>() < config.flip_prob;
    let noisy = rng.gen::<f64>() < config.noise_prob;
    let (h, w) = sample.extent();
    let mut out = flip_sample(sample, hflip, vflip);
    if noisy {
        let (lo, hi) = config.noise_range;
        for v in out.pixels.values_mut() {
            let n = if lo < hi { rng.gen_range(lo..=hi) } else { lo };
            *v = (*v + n).clamp(0.0, 255.0);
        }
    }
    debug_assert_eq!(out.extent(), (h, w));
    out
}

pub fn flip_sample(sample: &PatchSample, horizontal: bool, vertical: bool) -> PatchSample {
    if !horizontal && !vertical {
        return sample.clone();
    }
    let (h, w) = sample.extent();
    let fx = |x: f64| if horizontal { (w - 1) as f64 - x } else { x };
    let fy = |y: f64| if vertical { (h - 1) as f64 - y } else { y };
    let plane = h * w;
    let src = sample.pixels.values();
    let pixels = Tensor::from_fn(&[3, h, w], |k| {
        let (c, rem) = (k / plane, k % plane);
        let (r, col) = (rem / w, rem % w);
        let sr = if vertical { h - 1 - r } else { r };
        let sc = if horizontal { w - 1 - col } else { col };
        src[c * plane + sr * w + sc]
    });
    PatchSample {
        pixels,
        points: sample.points.iter().map(|p| Point::new(fx(p.x), fy(p.y))).collect(),
        detections: sample
            .detections
            .iter()
            .map(|d| Detection {
                cx: fx(d.cx),
                cy: fy(d.cy),
                ..*d
            })
            .collect(),
        gt: sample.gt.flipped(horizontal, vertical),
        det: sample.det.flipped(horizontal, vertical),
        score: sample.score.flipped(horizontal, vertical),
    }
}

/// `sum((pred - target)^2) / N`, where the leading axis of a rank-4 input is `N`.
pub fn squared_error_per_sample(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let shape = tape.shape(pred);
    let n = if shape.len() == 4 { shape[0] } else { 1 };
    let d = tape.sub(pred, target)?;
    let sq = tape.mul(d, d)?;
    let s = tape.sum(sq);
    Ok(tape.scale(s, 1.0 / n as f64))
}

/// Per-image summed squared error between RegNet output and ground truth, averaged over the batch.
pub fn loss_reg(tape: &mut Tape, d_reg: Var, d_gt: Var) -> Result<Var> {
    squared_error_per_sample(tape, d_reg, d_gt)
}

/// Squared error of the blended map plus `lambda` times the squared distance
/// of `K` from the detection score map, both summed per image and averaged over the batch.
pub fn loss_qua(tape: &mut Tape, d_final: Var, d_gt: Var, k: Var, s_det: Var, lambda: f64) -> Result<Var> {
    if tape.shape(k) != tape.shape(s_det) {
        return Err(Error::shape(
            "loss_qua",
            format!("attention {:?} vs score map {:?}", tape.shape(k), tape.shape(s_det)),
        ));
    }
    let fit = squared_error_per_sample(tape, d_final, d_gt)?;
    if lambda == 0.0 {
        return Ok(fit);
    }
    let reg = squared_error_per_sample(tape, k, s_det)?;
    let reg = tape.scale(reg, lambda);
    tape.add(fit, reg)
}

/// Block average over `s x s` cells of `[planes, h, w]`.
fn block_mean(values: &[f64], planes: usize, (h, w): (usize, usize), s: usize) -> Vec<f64> {
    if s == 1 {
        return values.to_vec();
    }
    let (oh, ow) = (h / s, w / s);
    let mut out = vec![0.0; planes * oh * ow];
    let norm = 1.0 / (s * s) as f64;
    for p in 0..planes {
        for r in 0..oh * s {
            for c in 0..ow * s {
                out[(p * oh + r / s) * ow + c / s] += values[(p * h + r) * w + c] * norm;
            }
        }
    }
    out
}

/// Batched network inputs and targets for a list of patches.
pub(crate) struct Batch {
    /// `[N, 3, H, W]`, network pixel scale.
    pub image: Tensor,
    /// `[N, 3, h_k, w_k]` at attention resolution.
    pub image_k: Tensor,
    pub det_k: Tensor,
    pub gt_k: Tensor,
    pub score_k: Tensor,
    /// `[N, 1, h_r, w_r]` at RegNet output resolution.
    pub gt_low: Tensor,
}

pub(crate) fn regnet_extent((h, w): (usize, usize)) -> (usize, usize) {
    (h.div_ceil(2).div_ceil(2), w.div_ceil(2).div_ceil(2))
}

pub(crate) fn attention_extent((h, w): (usize, usize), stride: usize) -> (usize, usize) {
    (h / stride, w / stride)
}

fn stack(parts: impl Iterator<Item = Vec<f64>>, shape: Vec<usize>) -> Result<Tensor> {
    Tensor::new(shape, parts.flatten().collect())
}

impl Batch {
    pub(crate) fn new(patches: &[PatchSample], stride: usize, with_targets: bool) -> Result<Batch> {
        let n = patches.len();
        let ext = patches
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?
            .extent();
        if patches.iter().any(|p| p.extent() != ext) {
            return Err(Error::shape("batch", "patches differ in size"));
        }
        let (h, w) = ext;
        let low = regnet_extent(ext);
        let k = attention_extent(ext, stride);
        if k.0 < low.0 || k.1 < low.1 || k.0 == 0 {
            return Err(Error::Config(format!(
                "attention resolution {k:?} is coarser than the RegNet output {low:?}"
            )));
        }
        let scaled = |p: &PatchSample| p.pixels.values().iter().map(|v| v * PIXEL_SCALE).collect::<Vec<_>>();
        let image = stack(patches.iter().map(scaled), vec![n, 3, h, w])?;
        let image_k = stack(patches.iter().map(|p| block_mean(&scaled(p), 3, ext, stride)), vec![n, 3, k.0, k.1])?;
        let resized = |m: &DensityMap, to| resize_conserving(m, to).map(|m| m.values().to_vec());
        let det_k = stack(
            patches.iter().map(|p| resized(&p.det, k)).collect::<Result<Vec<_>>>()?.into_iter(),
            vec![n, 1, k.0, k.1],
        )?;
        let (gt_k, score_k, gt_low) = if with_targets {
            (
                stack(
                    patches.iter().map(|p| resized(&p.gt, k)).collect::<Result<Vec<_>>>()?.into_iter(),
                    vec![n, 1, k.0, k.1],
                )?,
                stack(
                    patches.iter().map(|p| block_mean(p.score.values(), 1, ext, stride)),
                    vec![n, 1, k.0, k.1],
                )?,
                stack(
                    patches.iter().map(|p| resized(&p.gt, low)).collect::<Result<Vec<_>>>()?.into_iter(),
                    vec![n, 1, low.0, low.1],
                )?,
            )
        } else {
            let z = |e: (usize, usize)| Tensor::zeros(&[n, 1, e.0, e.1]);
            (z(k), z(k), z(low))
        };
        Ok(Batch {
            image,
            image_k,
            det_k,
            gt_k,
            score_k,
            gt_low,
        })
    }
}

fn constant(tape: &mut Tape, t: &Tensor) -> Result<Var> {
    tape.constant(t.shape().to_vec(), t.values().to_vec())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub regnet: RegNetParams,
    pub quality: QualityNetParams,
    pub plain: Option<QualityNetParams>,
    pub step: u64,
}

impl TrainState {
    pub fn init(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(config.seed));
        let regnet = RegNetParams::init(3, &mut rng);
        let quality = QualityNetParams::init(&config.qualitynet, &mut rng)?;
        let plain = if config.train_plain {
            Some(QualityNetParams::init(&config.qualitynet, &mut rng)?)
        } else {
            None
        };
        Ok(TrainState {
            regnet,
            quality,
            plain,
            step: 0,
        })
    }

    pub fn model(&self, config: &TrainConfig) -> Model {
        Model {
            regnet: self.regnet.clone(),
            quality: Some(self.quality.clone()),
            plain: self.plain.clone(),
            plain_regnet: None,
            attention_stride: config.attention_stride,
        }
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = self.model_checkpoint()?;
        ck.push(STEP_ENTRY, Tensor::scalar(self.step as f64))?;
        Ok(ck)
    }

    fn model_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        self.regnet.write_checkpoint(&mut ck, crate::networks::REGNET_PREFIX)?;
        self.quality.write_checkpoint(&mut ck, crate::networks::QUALITYNET_PREFIX)?;
        if let Some(p) = &self.plain {
            p.write_checkpoint(&mut ck, crate::evaluation::PLAIN_PREFIX)?;
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint, config: &TrainConfig) -> Result<Self> {
        let regnet = RegNetParams::from_checkpoint(ck, crate::networks::REGNET_PREFIX)?;
        let quality =
            QualityNetParams::from_checkpoint(ck, crate::networks::QUALITYNET_PREFIX, config.qualitynet.density_scale)?;
        let plain = if config.train_plain {
            Some(QualityNetParams::from_checkpoint(
                ck,
                crate::evaluation::PLAIN_PREFIX,
                config.qualitynet.density_scale,
            )?)
        } else {
            None
        };
        let step = match ck.get(STEP_ENTRY) {
            Some(t) if t.len() == 1 && t.values()[0] >= 0.0 && t.values()[0].fract() == 0.0 => t.values()[0] as u64,
            Some(_) => return Err(Error::InvalidArgument(format!("{STEP_ENTRY} must be a non-negative integer"))),
            None => 0,
        };
        Ok(TrainState {
            regnet,
            quality,
            plain,
            step,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub lr: f64,
    pub loss_reg: f64,
    pub loss_qua: f64,
    pub loss_qua_plain: Option<f64>,
}

/// One alternating update: RegNet on its loss, then each attention head on
/// the quality loss with `D^reg` recomputed from the fresh RegNet.
pub fn train_step(state: &mut TrainState, batch: &[PatchSample], config: &TrainConfig) -> Result<StepLosses> {
    let b = Batch::new(batch, config.attention_stride, true)?;
    train_step_batched(state, &b, config)
}

enum RegSource<'a> {
    Detached(&'a Tensor),
    Live(&'a mut RegNetParams),
}

struct HeadUpdate<'a> {
    batch: &'a Batch,
    lambda: f64,
    lr: f64,
    step: u64,
    loss_reg: f64,
}

impl HeadUpdate<'_> {
    fn run(&self, head: &mut QualityNetParams, reg: RegSource<'_>) -> Result<f64> {
        let b = self.batch;
        let mut tape = Tape::new();
        let hb = head.bind(&mut tape);
        let (reg_var, live) = match reg {
            RegSource::Detached(t) => (constant(&mut tape, t)?, None),
            RegSource::Live(r) => {
                let rb = r.bind(&mut tape);
                let x = constant(&mut tape, &b.image)?;
                (r.forward(&mut tape, &rb, x)?, Some((r, rb)))
            }
        };
        let image = constant(&mut tape, &b.image_k)?;
        let det = constant(&mut tape, &b.det_k)?;
        let gt = constant(&mut tape, &b.gt_k)?;
        let score = constant(&mut tape, &b.score_k)?;
        let f = fuse_on_tape(&mut tape, head, &hb, image, det, reg_var)?;
        let loss = loss_qua(&mut tape, f.blended, gt, f.attention, score, self.lambda)?;
        let v = tape.value(loss)[0];
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                loss_reg: self.loss_reg,
                loss_qua: v,
            });
        }
        tape.backward(loss)?;
        head.store_grads(&tape, &hb)?;
        sgd_step(&mut head.params_mut(), self.lr)?;
        if let Some((r, rb)) = live {
            r.store_grads(&tape, &rb)?;
            sgd_step(&mut r.params_mut(), self.lr)?;
        }
        Ok(v)
    }
}

/// Half of an alternating update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// RegNet on `loss_reg`.
    Regression,
    /// The attention heads on `loss_qua`.
    Attention,
}

/// Run a single phase at the current step's learning rate without advancing
/// the step counter. Returns the main loss of that phase.
pub fn train_phase(state: &mut TrainState, batch: &[PatchSample], config: &TrainConfig, phase: Phase) -> Result<f64> {
    let b = Batch::new(batch, config.attention_stride, true)?;
    let lr = config.lr_at(state.step);
    match phase {
        Phase::Regression => regression_phase(state, &b, lr),
        Phase::Attention => attention_phase(state, &b, config, lr, f64::NAN).map(|(main, _)| main),
    }
}

fn regression_phase(state: &mut TrainState, b: &Batch, lr: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = state.regnet.bind(&mut tape);
    let x = constant(&mut tape, &b.image)?;
    let gt = constant(&mut tape, &b.gt_low)?;
    let d_reg = state.regnet.forward(&mut tape, &bound, x)?;
    let loss = loss_reg(&mut tape, d_reg, gt)?;
    let v = tape.value(loss)[0];
    if !v.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: state.step,
            loss_reg: v,
            loss_qua: f64::NAN,
        });
    }
    tape.backward(loss)?;
    state.regnet.store_grads(&tape, &bound)?;
    sgd_step(&mut state.regnet.params_mut(), lr)?;
    Ok(v)
}

fn attention_phase(
    state: &mut TrainState,
    b: &Batch,
    config: &TrainConfig,
    lr: f64,
    loss_reg: f64,
) -> Result<(f64, Option<f64>)> {
    let update = |lambda| HeadUpdate {
        batch: b,
        lambda,
        lr,
        step: state.step,
        loss_reg,
    };
    let (main, plain) = (update(config.lambda), update(0.0));
    let detached = state.regnet.predict(&b.image)?;
    let loss_qua_value = if config.qua_grad_to_reg {
        main.run(&mut state.quality, RegSource::Live(&mut state.regnet))?
    } else {
        main.run(&mut state.quality, RegSource::Detached(&detached))?
    };
    let loss_qua_plain = match state.plain.as_mut() {
        Some(head) => Some(plain.run(head, RegSource::Detached(&detached))?),
        None => None,
    };
    Ok((loss_qua_value, loss_qua_plain))
}

pub(crate) fn train_step_batched(state: &mut TrainState, b: &Batch, config: &TrainConfig) -> Result<StepLosses> {
    let lr = config.lr_at(state.step);
    let loss_reg_value = regression_phase(state, b, lr)?;
    // heads see the refreshed regression output
    let (loss_qua_value, loss_qua_plain) = attention_phase(state, b, config, lr, loss_reg_value)?;
    state.step += 1;
    Ok(StepLosses {
        lr,
        loss_reg: loss_reg_value,
        loss_qua: loss_qua_value,
        loss_qua_plain,
    })
}

pub const METRICS_HEADER: &str = "step,lr,loss_reg,loss_qua,val_mae,val_mse";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub lr: f64,
    /// Mean training losses since the previous row.
    pub loss_reg: f64,
    pub loss_qua: f64,
    pub val_mae: f64,
    pub val_mse: f64,
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.lr, self.loss_reg, self.loss_qua, self.val_mae, self.val_mse
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters at the best validation step for each learned fusion head.
    pub best: Checkpoint,
    pub best_step: u64,
    pub best_val_mae: f64,
    pub best_plain_step: Option<u64>,
    pub best_plain_val_mae: Option<f64>,
    /// Final state, including the step counter, for resuming.
    pub last: Checkpoint,
    pub metrics: Vec<MetricsRow>,
}

/// Shuffled scene order for one pass over the training set.
fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(epoch.wrapping_add(0xe90c))));
    order.shuffle(&mut rng);
    order
}

fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(seed.rotate_left(17) ^ splitmix(step)))
}

pub fn train(config: &TrainConfig, train_scenes: &[Scene], val_scenes: &[Scene]) -> Result<TrainOutcome> {
    train_from(TrainState::init(config)?, config, train_scenes, val_scenes, |_| {})
}

/// Continues `state` up to `config.total_steps`, validating every
/// `eval_interval` steps and after the final step.
pub fn train_from(
    mut state: TrainState,
    config: &TrainConfig,
    train_scenes: &[Scene],
    val_scenes: &[Scene],
    mut progress: impl FnMut(&MetricsRow),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_scenes.is_empty() || val_scenes.is_empty() {
        return Err(Error::InvalidArgument("training and validation splits must be non-empty".into()));
    }
    let grid = (config.patch_cols, config.patch_rows);
    let val_truth: Vec<f64> = val_scenes.iter().map(|s| s.count() as f64).collect();
    let mut best = state.model_checkpoint()?;
    let mut best_step = state.step;
    let mut best_mae = f64::INFINITY;
    let mut best_plain: Option<(Checkpoint, u64, f64)> = None;
    let mut metrics = Vec::new();
    let (mut sum_reg, mut sum_qua, mut since) = (0.0, 0.0, 0u64);
    let mut order: Option<(u64, Vec<usize>)> = None;
    let n = train_scenes.len() as u64;
    while state.step < config.total_steps {
        let step = state.step;
        let epoch = step / n;
        if order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            order = Some((epoch, epoch_order(train_scenes.len(), config.seed, epoch)));
        }
        let scene = &train_scenes[order.as_ref().expect("order set").1[(step % n) as usize]];
        let mut rng = step_rng(config.seed, step);
        let patches: Vec<PatchSample> = crop_patches(scene, grid, &config.kernel, config.score_default)?
            .iter()
            .map(|p| augment(p, config, &mut rng))
            .collect();
        let losses = train_step(&mut state, &patches, config)?;
        sum_reg += losses.loss_reg;
        sum_qua += losses.loss_qua;
        since += 1;
        if state.step.is_multiple_of(config.eval_interval) || state.step == config.total_steps {
            let model = state.model(config);
            let records = evaluate_model(&model, val_scenes, grid, &config.kernel, config.score_default)?;
            let preds = |v: Variant| records.iter().map(|r| r.prediction(v)).collect::<Option<Vec<f64>>>();
            let q = preds(Variant::DecidenetQuality).expect("quality head present");
            let row = MetricsRow {
                step: state.step,
                lr: losses.lr,
                loss_reg: sum_reg / since as f64,
                loss_qua: sum_qua / since as f64,
                val_mae: mae(&q, &val_truth)?,
                val_mse: mse(&q, &val_truth)?,
            };
            if row.val_mae < best_mae {
                best_mae = row.val_mae;
                best_step = state.step;
                best = state.model_checkpoint()?;
            }
            if let Some(p) = preds(Variant::DecidenetPlain) {
                let m = mae(&p, &val_truth)?;
                if best_plain.as_ref().is_none_or(|b| m < b.2) {
                    let mut ck = Checkpoint::new();
                    state.regnet.write_checkpoint(&mut ck, crate::evaluation::PLAIN_REGNET_PREFIX)?;
                    if let Some(h) = &state.plain {
                        h.write_checkpoint(&mut ck, crate::evaluation::PLAIN_PREFIX)?;
                    }
                    best_plain = Some((ck, state.step, m));
                }
            }
            progress(&row);
            metrics.push(row);
            (sum_reg, sum_qua, since) = (0.0, 0.0, 0);
        }
    }
    // the best checkpoint carries the main model plus the separately selected plain model
    let mut out = Checkpoint::new();
    for (name, t) in best.entries() {
        if !name.starts_with(crate::evaluation::PLAIN_PREFIX) {
            out.push(name.clone(), t.clone())?;
        }
    }
    if let Some((ck, _, _)) = &best_plain {
        for (name, t) in ck.entries() {
            out.push(name.clone(), t.clone())?;
        }
    }
    out.push(STEP_ENTRY, Tensor::scalar(best_step as f64))?;
    Ok(TrainOutcome {
        best: out,
        best_step,
        best_val_mae: best_mae,
        best_plain_step: best_plain.as_ref().map(|b| b.1),
        best_plain_val_mae: best_plain.as_ref().map(|b| b.2),
        last: state.to_checkpoint()?,
        metrics,
    })
}
