//! RegNet, QualityNet, and the attention-weighted blend of the two density maps.

use rand::Rng;

use crate::density::{resize_conserving, DensityMap};
use crate::error::{Error, Result};
use crate::numerics::{he_normal, Checkpoint, Padding, Tape, Tensor, Var};

/// One convolution: kernels `[c_out, c_in, k, k]` and bias `[c_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvLayer {
    pub fn init<R: Rng + ?Sized>(c_out: usize, c_in: usize, k: usize, rng: &mut R) -> Self {
        ConvLayer {
            weight: he_normal(&[c_out, c_in, k, k], rng),
            bias: Tensor::zeros(&[c_out]).requiring_grad(),
        }
    }

    pub fn zeros(c_out: usize, c_in: usize, k: usize) -> Self {
        ConvLayer {
            weight: Tensor::zeros(&[c_out, c_in, k, k]).requiring_grad(),
            bias: Tensor::zeros(&[c_out]).requiring_grad(),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }
}

/// Tape handles for a list of conv layers, in layer order.
#[derive(Clone, Debug)]
pub struct BoundLayers(Vec<(Var, Var)>);

fn bind_layers<'a>(tape: &mut Tape, layers: impl Iterator<Item = &'a ConvLayer>) -> BoundLayers {
    BoundLayers(layers.map(|l| (tape.leaf(&l.weight), tape.leaf(&l.bias))).collect())
}

fn store_layer_grads<'a>(tape: &Tape, bound: &BoundLayers, layers: impl Iterator<Item = &'a mut ConvLayer>) -> Result<()> {
    for (l, &(w, b)) in layers.zip(&bound.0) {
        tape.export_grad(w, &mut l.weight)?;
        tape.export_grad(b, &mut l.bias)?;
    }
    Ok(())
}

fn push_layers<'a>(ck: &mut Checkpoint, prefix: &str, layers: impl Iterator<Item = &'a ConvLayer>) -> Result<()> {
    for (i, l) in layers.enumerate() {
        ck.push(format!("{prefix}.conv{}.w", i + 1), l.weight.clone())?;
        ck.push(format!("{prefix}.conv{}.b", i + 1), l.bias.clone())?;
    }
    Ok(())
}

fn read_layer(ck: &Checkpoint, prefix: &str, index: usize) -> Option<Result<ConvLayer>> {
    let w = ck.get(&format!("{prefix}.conv{index}.w"))?;
    let b = ck.get(&format!("{prefix}.conv{index}.b"));
    Some(match (w.shape(), b) {
        ([c_out, _, kh, kw], Some(b)) if kh == kw && b.shape() == [*c_out] => Ok(ConvLayer {
            weight: w.clone().requiring_grad(),
            bias: b.clone().requiring_grad(),
        }),
        _ => Err(Error::InvalidArgument(format!(
            "checkpoint layer {prefix}.conv{index} has malformed or missing tensors"
        ))),
    })
}

pub const REGNET_PREFIX: &str = "regnet";

/// Five-layer fully convolutional density regressor.
#[derive(Clone, Debug, PartialEq)]
pub struct RegNetParams {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub conv3: ConvLayer,
    pub conv4: ConvLayer,
    pub conv5: ConvLayer,
}

impl RegNetParams {
    pub fn init<R: Rng + ?Sized>(in_channels: usize, rng: &mut R) -> Self {
        RegNetParams {
            conv1: ConvLayer::init(20, in_channels, 7, rng),
            conv2: ConvLayer::init(40, 20, 5, rng),
            conv3: ConvLayer::init(20, 40, 5, rng),
            conv4: ConvLayer::init(10, 20, 5, rng),
            conv5: ConvLayer::init(1, 10, 1, rng),
        }
    }

    pub fn zeros(in_channels: usize) -> Self {
        RegNetParams {
            conv1: ConvLayer::zeros(20, in_channels, 7),
            conv2: ConvLayer::zeros(40, 20, 5),
            conv3: ConvLayer::zeros(20, 40, 5),
            conv4: ConvLayer::zeros(10, 20, 5),
            conv5: ConvLayer::zeros(1, 10, 1),
        }
    }

    pub fn layers(&self) -> [&ConvLayer; 5] {
        [&self.conv1, &self.conv2, &self.conv3, &self.conv4, &self.conv5]
    }

    pub fn layers_mut(&mut self) -> [&mut ConvLayer; 5] {
        [&mut self.conv1, &mut self.conv2, &mut self.conv3, &mut self.conv4, &mut self.conv5]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers_mut()
            .into_iter()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundLayers {
        bind_layers(tape, self.layers().into_iter())
    }

    pub fn store_grads(&mut self, tape: &Tape, bound: &BoundLayers) -> Result<()> {
        store_layer_grads(tape, bound, self.layers_mut().into_iter())
    }

    /// conv1 - pool - conv2 - pool - conv3 - conv4 - conv5, ReLU after every
    /// convolution. Output is `[.., 1, H/4, W/4]` (ceil for odd extents).
    pub fn forward(&self, tape: &mut Tape, bound: &BoundLayers, input: Var) -> Result<Var> {
        let shape = tape.shape(input);
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if h < 16 || w < 16 {
            return Err(Error::shape("regnet_forward", format!("patch {h}x{w} is smaller than 16x16")));
        }
        let mut x = input;
        for (i, &(wv, bv)) in bound.0.iter().enumerate() {
            x = tape.conv2d(x, wv, bv, Padding::Same)?;
            x = tape.relu(x);
            if i < 2 {
                x = tape.maxpool2(x)?;
            }
        }
        Ok(x)
    }

    /// Frozen-parameter forward; `patch` is `[C, H, W]` or `[N, C, H, W]`.
    pub fn predict(&self, patch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let x = tape.constant(patch.shape().to_vec(), patch.values().to_vec())?;
        let y = self.forward(&mut tape, &bound, x)?;
        Ok(tape.tensor(y))
    }

    pub fn write_checkpoint(&self, ck: &mut Checkpoint, prefix: &str) -> Result<()> {
        push_layers(ck, prefix, self.layers().into_iter())
    }

    pub fn from_checkpoint(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let mut layers = Vec::with_capacity(5);
        for i in 1..=5 {
            layers.push(read_layer(ck, prefix, i).ok_or_else(|| {
                Error::Missing(format!("checkpoint has no {prefix}.conv{i} parameters"))
            })??);
        }
        let expected = [(20, 7), (40, 5), (20, 5), (10, 5), (1, 1)];
        for (i, (l, (c, k))) in layers.iter().zip(expected).enumerate() {
            if l.out_channels() != c || l.kernel() != k {
                return Err(Error::InvalidArgument(format!(
                    "{prefix}.conv{} must have {c} {k}x{k} filters, found {:?}",
                    i + 1,
                    l.weight.shape()
                )));
            }
        }
        let mut it = layers.into_iter();
        let mut next = || it.next().expect("five layers");
        Ok(RegNetParams {
            conv1: next(),
            conv2: next(),
            conv3: next(),
            conv4: next(),
            conv5: next(),
        })
    }
}

/// Run the RegNet on a single `[C, H, W]` patch and return `D^reg` at quarter resolution.
pub fn regnet_forward(params: &RegNetParams, patch: &Tensor) -> Result<DensityMap> {
    let y = params.predict(patch)?;
    let s = y.shape();
    if s.len() != 3 {
        return Err(Error::shape("regnet_forward", format!("expected one [C,H,W] patch, got {:?}", patch.shape())));
    }
    DensityMap::new(s[1], s[2], y.into_values())
}

#[derive(Clone, Debug, PartialEq)]
pub struct QualityNetConfig {
    /// Output channels of each layer; the last must be 1.
    pub widths: Vec<usize>,
    pub kernel: usize,
    /// Factor applied to both density channels before stacking them with the image.
    pub density_scale: f64,
}

impl Default for QualityNetConfig {
    fn default() -> Self {
        QualityNetConfig {
            widths: vec![16, 16, 8, 1],
            kernel: 3,
            density_scale: 100.0,
        }
    }
}

impl QualityNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() != 4 || self.widths.last() != Some(&1) || self.widths.contains(&0) {
            return Err(Error::Config(format!(
                "qualitynet widths must be four positive values ending in 1, got {:?}",
                self.widths
            )));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("qualitynet kernel must be odd, got {}", self.kernel)));
        }
        if !(self.density_scale.is_finite() && self.density_scale > 0.0) {
            return Err(Error::Config(format!("density scale must be > 0, got {}", self.density_scale)));
        }
        Ok(())
    }
}

pub const QUALITYNET_PREFIX: &str = "qualitynet";
/// Image channels plus the two density maps.
pub const QUALITYNET_INPUT_CHANNELS: usize = 5;

/// Four same-padded convolutions and a pixelwise sigmoid producing the attention map.
#[derive(Clone, Debug, PartialEq)]
pub struct QualityNetParams {
    pub layers: Vec<ConvLayer>,
    pub density_scale: f64,
}

impl QualityNetParams {
    pub fn init<R: Rng + ?Sized>(config: &QualityNetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut c_in = QUALITYNET_INPUT_CHANNELS;
        let layers = config
            .widths
            .iter()
            .map(|&c_out| {
                let l = ConvLayer::init(c_out, c_in, config.kernel, rng);
                c_in = c_out;
                l
            })
            .collect();
        Ok(QualityNetParams {
            layers,
            density_scale: config.density_scale,
        })
    }

    pub fn zeros(config: &QualityNetConfig) -> Result<Self> {
        config.validate()?;
        let mut c_in = QUALITYNET_INPUT_CHANNELS;
        let layers = config
            .widths
            .iter()
            .map(|&c_out| {
                let l = ConvLayer::zeros(c_out, c_in, config.kernel);
                c_in = c_out;
                l
            })
            .collect();
        Ok(QualityNetParams {
            layers,
            density_scale: config.density_scale,
        })
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundLayers {
        bind_layers(tape, self.layers.iter())
    }

    pub fn store_grads(&mut self, tape: &Tape, bound: &BoundLayers) -> Result<()> {
        store_layer_grads(tape, bound, self.layers.iter_mut())
    }

    /// Stacks `[image(3), det, reg]` along channels, scaling the density channels.
    pub fn stack_input(&self, tape: &mut Tape, image: Var, det: Var, reg: Var) -> Result<Var> {
        let det = tape.scale(det, self.density_scale);
        let reg = tape.scale(reg, self.density_scale);
        tape.concat_channels(&[image, det, reg])
    }

    /// Maps a 5-channel stack to the attention map `K` at the same resolution.
    pub fn forward(&self, tape: &mut Tape, bound: &BoundLayers, stacked: Var) -> Result<Var> {
        let shape = tape.shape(stacked);
        let channels = shape[shape.len() - 3];
        if channels != QUALITYNET_INPUT_CHANNELS {
            return Err(Error::shape(
                "qualitynet_forward",
                format!("input channels: expected {QUALITYNET_INPUT_CHANNELS}, got {channels}"),
            ));
        }
        let mut x = stacked;
        let last = bound.0.len() - 1;
        for (i, &(wv, bv)) in bound.0.iter().enumerate() {
            x = tape.conv2d(x, wv, bv, Padding::Same)?;
            x = if i == last { tape.sigmoid(x) } else { tape.relu(x) };
        }
        Ok(x)
    }

    pub fn write_checkpoint(&self, ck: &mut Checkpoint, prefix: &str) -> Result<()> {
        push_layers(ck, prefix, self.layers.iter())
    }

    pub fn from_checkpoint(ck: &Checkpoint, prefix: &str, density_scale: f64) -> Result<Self> {
        let mut layers = Vec::with_capacity(4);
        for i in 1..=4 {
            layers.push(
                read_layer(ck, prefix, i)
                    .ok_or_else(|| Error::Missing(format!("checkpoint has no {prefix}.conv{i} parameters")))??,
            );
        }
        let mut c_in = QUALITYNET_INPUT_CHANNELS;
        for (i, l) in layers.iter().enumerate() {
            if l.in_channels() != c_in {
                return Err(Error::InvalidArgument(format!(
                    "{prefix}.conv{} expects {} input channels, previous layer gives {c_in}",
                    i + 1,
                    l.in_channels()
                )));
            }
            c_in = l.out_channels();
        }
        if c_in != 1 {
            return Err(Error::InvalidArgument(format!("{prefix}.conv4 must have one output channel")));
        }
        Ok(QualityNetParams { layers, density_scale })
    }
}

/// Per-pixel weights in (0, 1): how far to trust detection over regression.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl AttentionMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width || height == 0 || width == 0 {
            return Err(Error::shape("attention map", format!("{height}x{width} cannot hold {} values", values.len())));
        }
        if let Some(v) = values.iter().find(|v| !(**v >= 0.0 && **v <= 1.0)) {
            return Err(Error::InvalidArgument(format!("attention weight {v} outside [0, 1]")));
        }
        Ok(AttentionMap { height, width, values })
    }

    pub fn filled(height: usize, width: usize, k: f64) -> Result<Self> {
        Self::new(height, width, vec![k; height * width])
    }

    pub fn extent(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Builds `[1, 1, H, W]` from a density map for tape use.
pub(crate) fn density_var(tape: &mut Tape, map: &DensityMap) -> Result<Var> {
    tape.constant(vec![1, 1, map.height(), map.width()], map.values().to_vec())
}

/// Attention map for one `[3, H, W]` patch. Both density maps are resampled
/// (count-conserving) to the patch resolution before stacking.
pub fn qualitynet_forward(
    params: &QualityNetParams,
    patch: &Tensor,
    d_det: &DensityMap,
    d_reg: &DensityMap,
) -> Result<AttentionMap> {
    let (c, h, w) = match *patch.shape() {
        [c, h, w] => (c, h, w),
        ref s => return Err(Error::shape("qualitynet_forward", format!("expected [3,H,W] patch, got {s:?}"))),
    };
    if c != 3 {
        return Err(Error::shape("qualitynet_forward", format!("patch channels: expected 3, got {c}")));
    }
    let det = resize_conserving(d_det, (h, w))?;
    let reg = resize_conserving(d_reg, (h, w))?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let image = tape.constant(vec![1, c, h, w], patch.values().to_vec())?;
    let dv = density_var(&mut tape, &det)?;
    let rv = density_var(&mut tape, &reg)?;
    let stacked = params.stack_input(&mut tape, image, dv, rv)?;
    let k = params.forward(&mut tape, &bound, stacked)?;
    AttentionMap::new(h, w, tape.value(k).to_vec())
}

/// Tape values produced by one QualityNet pass.
#[derive(Clone, Copy, Debug)]
pub struct Fusion {
    /// Regression density resampled (count-preserving) to the attention resolution.
    pub reg: Var,
    pub attention: Var,
    pub blended: Var,
}

/// Runs `head` on `[N, 3, h, w]` image, `[N, 1, h, w]` detection density and
/// the RegNet output `reg_low`, then blends at `(h, w)`.
pub fn fuse_on_tape(
    tape: &mut Tape,
    head: &QualityNetParams,
    bound: &BoundLayers,
    image: Var,
    det: Var,
    reg_low: Var,
) -> Result<Fusion> {
    let shape = tape.shape(det).to_vec();
    let target = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let low = tape.shape(reg_low);
    let reg = if (low[low.len() - 2], low[low.len() - 1]) == target {
        reg_low
    } else {
        let up = tape.upsample_bilinear(reg_low, target)?;
        tape.conserve_counts(reg_low, up)?
    };
    let stacked = head.stack_input(tape, image, det, reg)?;
    let attention = head.forward(tape, bound, stacked)?;
    let ones = tape.constant(shape.clone(), vec![1.0; shape.iter().product()])?;
    let inv = tape.sub(ones, attention)?;
    let a = tape.mul(attention, det)?;
    let b = tape.mul(inv, reg)?;
    let blended = tape.add(a, b)?;
    Ok(Fusion { reg, attention, blended })
}

/// `D_final = K * D_det + (1 - K) * D_reg`, pixelwise.
pub fn blend(k: &AttentionMap, d_det: &DensityMap, d_reg: &DensityMap) -> Result<DensityMap> {
    if k.extent() != d_det.extent() || k.extent() != d_reg.extent() {
        return Err(Error::shape(
            "blend",
            format!(
                "attention {:?}, detection {:?}, regression {:?} must match",
                k.extent(),
                d_det.extent(),
                d_reg.extent()
            ),
        ));
    }
    let values = k
        .values()
        .iter()
        .zip(d_det.values().iter().zip(d_reg.values()))
        .map(|(&kv, (&det, &reg))| kv * det + (1.0 - kv) * reg)
        .collect();
    DensityMap::new(k.height, k.width, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::{gt_density, GaussianKernelSpec, Point, PointSet};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_patch(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
        Tensor::from_fn(&[3, h, w], |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn regnet_zero_params_give_zero_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = regnet_forward(&RegNetParams::zeros(3), &random_patch(&mut rng, 32, 32)).unwrap();
        assert!(out.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn regnet_output_shape_and_sign() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = RegNetParams::init(3, &mut rng);
        let out = regnet_forward(&net, &random_patch(&mut rng, 64, 64)).unwrap();
        assert_eq!(out.extent(), (16, 16));
        let odd = regnet_forward(&net, &random_patch(&mut rng, 18, 22)).unwrap();
        assert_eq!(odd.extent(), (5, 6));
        assert!(regnet_forward(&net, &random_patch(&mut rng, 15, 32)).is_err());
    }

    #[test]
    fn batched_predict_matches_single_patches() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = RegNetParams::init(3, &mut rng);
        let a = random_patch(&mut rng, 16, 20);
        let b = random_patch(&mut rng, 16, 20);
        let batch = Tensor::new(vec![2, 3, 16, 20], [a.values(), b.values()].concat()).unwrap();
        let y = net.predict(&batch).unwrap();
        let ya = regnet_forward(&net, &a).unwrap();
        let yb = regnet_forward(&net, &b).unwrap();
        assert_eq!(&y.values()[..20], ya.values());
        assert_eq!(&y.values()[20..], yb.values());
    }

    fn maps(h: usize, w: usize) -> (DensityMap, DensityMap) {
        let k = GaussianKernelSpec::default();
        let det = gt_density(&PointSet(vec![Point::new(5.0, 6.0)]), (h, w), &k).unwrap();
        let reg = gt_density(&PointSet(vec![Point::new(9.0, 3.0), Point::new(2.0, 2.0)]), (h / 4, w / 4), &k).unwrap();
        (det, reg)
    }

    #[test]
    fn qualitynet_range_shape_and_zero_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = QualityNetConfig::default();
        let (det, reg) = maps(24, 28);
        let patch = random_patch(&mut rng, 24, 28);
        let k = qualitynet_forward(&QualityNetParams::init(&cfg, &mut rng).unwrap(), &patch, &det, &reg).unwrap();
        assert_eq!(k.extent(), (24, 28));
        assert!(k.values().iter().all(|&v| v > 0.0 && v < 1.0));
        let k0 = qualitynet_forward(&QualityNetParams::zeros(&cfg).unwrap(), &patch, &det, &reg).unwrap();
        assert!(k0.values().iter().all(|&v| v == 0.5));
        let gray = Tensor::zeros(&[1, 24, 28]);
        assert!(qualitynet_forward(&QualityNetParams::zeros(&cfg).unwrap(), &gray, &det, &reg).is_err());
    }

    #[test]
    fn blend_identities() {
        let (det, reg) = maps(16, 16);
        let reg = resize_conserving(&reg, (16, 16)).unwrap();
        assert_eq!(blend(&AttentionMap::filled(16, 16, 1.0).unwrap(), &det, &reg).unwrap(), det);
        assert_eq!(blend(&AttentionMap::filled(16, 16, 0.0).unwrap(), &det, &reg).unwrap(), reg);
        let avg = blend(&AttentionMap::filled(16, 16, 0.5).unwrap(), &det, &reg).unwrap();
        for i in 0..256 {
            assert_eq!(avg.values()[i], (det.values()[i] + reg.values()[i]) / 2.0);
        }
        assert!(blend(&AttentionMap::filled(8, 16, 0.5).unwrap(), &det, &reg).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let reg = RegNetParams::init(3, &mut rng);
        let q = QualityNetParams::init(&QualityNetConfig::default(), &mut rng).unwrap();
        let mut ck = Checkpoint::new();
        reg.write_checkpoint(&mut ck, REGNET_PREFIX).unwrap();
        q.write_checkpoint(&mut ck, QUALITYNET_PREFIX).unwrap();
        assert_eq!(ck.entries()[0].0, "regnet.conv1.w");
        assert_eq!(ck.entries().last().unwrap().0, "qualitynet.conv4.b");
        assert_eq!(RegNetParams::from_checkpoint(&ck, REGNET_PREFIX).unwrap(), reg);
        assert_eq!(QualityNetParams::from_checkpoint(&ck, QUALITYNET_PREFIX, 100.0).unwrap(), q);
        assert!(QualityNetParams::from_checkpoint(&ck, "missing", 100.0).is_err());
    }
}
