//! Define-by-run reverse-mode differentiation.
//!
//! Every operation appends a node to the [`Tape`]; node order is therefore a
//! topological order and [`Tape::backward`] is a single reverse sweep.
//! Image operations accept `[c, h, w]` or batched `[n, c, h, w]` inputs.

use super::kernels::{self, ConvGeom};
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding that keeps the spatial extent (odd kernels only).
    Same,
    /// No padding; the output shrinks by `k - 1`.
    Valid,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
        batch: usize,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Relu(Var),
    Sigmoid(Var),
    Bilinear {
        input: Var,
        planes: usize,
        from: (usize, usize),
        to: (usize, usize),
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Concat {
        inputs: Vec<Var>,
        batch: usize,
        plane: usize,
    },
    ConserveCounts {
        source: Var,
        resampled: Var,
        batch: usize,
        // per sample: (source sum, resampled sum)
        sums: Vec<(f64, f64)>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

struct ImageDims {
    batch: usize,
    channels: usize,
    h: usize,
    w: usize,
    batched: bool,
}

fn image_dims(op: &'static str, shape: &[usize]) -> Result<ImageDims> {
    match *shape {
        [c, h, w] => Ok(ImageDims {
            batch: 1,
            channels: c,
            h,
            w,
            batched: false,
        }),
        [n, c, h, w] => Ok(ImageDims {
            batch: n,
            channels: c,
            h,
            w,
            batched: true,
        }),
        _ => Err(Error::shape(
            op,
            format!("expected [C,H,W] or [N,C,H,W], got rank {} shape {shape:?}", shape.len()),
        )),
    }
}

fn image_shape(d: &ImageDims, channels: usize, h: usize, w: usize) -> Vec<usize> {
    if d.batched {
        vec![d.batch, channels, h, w]
    } else {
        vec![channels, h, w]
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(&g) {
                *a += v;
            }
        }
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    /// Records a tensor as a leaf; it is differentiable iff the tensor requires grad.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records a non-differentiable input.
    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        if numel(&shape) != values.len() || shape.contains(&0) {
            return Err(Error::shape(
                "constant",
                format!("shape {shape:?} does not hold {} values", values.len()),
            ));
        }
        Ok(self.push(shape, values, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape nodes hold consistent shapes")
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Copies the gradient for `v` into `target.grad`.
    pub fn export_grad(&self, v: Var, target: &mut Tensor) -> Result<()> {
        let g = self
            .grad(v)
            .ok_or_else(|| Error::InvalidArgument("no gradient recorded for this variable".into()))?;
        target.set_grad(g.to_vec())
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, padding: Padding) -> Result<Var> {
        let d = image_dims("conv2d", self.shape(input))?;
        let (c_out, c_in, kh, kw) = match *self.shape(weight) {
            [a, b, c, e] => (a, b, c, e),
            ref s => {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernels must be [C_out,C_in,kH,kW], got {s:?}"),
                ))
            }
        };
        if c_in != d.channels {
            return Err(Error::shape(
                "conv2d",
                format!("input channels: input has {}, kernels expect {c_in}", d.channels),
            ));
        }
        if self.shape(bias) != [c_out] {
            return Err(Error::shape(
                "conv2d",
                format!("bias length: expected [{c_out}], got {:?}", self.shape(bias)),
            ));
        }
        let (pad, out_h, out_w) = match padding {
            Padding::Same => {
                if kh % 2 == 0 {
                    return Err(Error::shape("conv2d", format!("kernel height {kh} must be odd for same padding")));
                }
                if kw % 2 == 0 {
                    return Err(Error::shape("conv2d", format!("kernel width {kw} must be odd for same padding")));
                }
                if kh != kw {
                    return Err(Error::shape("conv2d", format!("kernel height {kh} != kernel width {kw}")));
                }
                ((kh - 1) / 2, d.h, d.w)
            }
            Padding::Valid => {
                if kh > d.h {
                    return Err(Error::shape("conv2d", format!("kernel height {kh} exceeds input height {}", d.h)));
                }
                if kw > d.w {
                    return Err(Error::shape("conv2d", format!("kernel width {kw} exceeds input width {}", d.w)));
                }
                (0, d.h - kh + 1, d.w - kw + 1)
            }
        };
        let geom = ConvGeom {
            c_in,
            h: d.h,
            w: d.w,
            c_out,
            kh,
            kw,
            pad,
            out_h,
            out_w,
        };
        let value = kernels::conv2d_forward(&geom, d.batch, self.value(input), self.value(weight), self.value(bias));
        let rg = self.requires_grad(input) || self.requires_grad(weight) || self.requires_grad(bias);
        Ok(self.push(
            image_shape(&d, c_out, out_h, out_w),
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                batch: d.batch,
            },
            rg,
        ))
    }

    /// 2x2 max pooling; odd extents replicate the last row/column.
    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let d = image_dims("maxpool2", self.shape(input))?;
        let (value, argmax) = kernels::maxpool2_forward(d.batch * d.channels, d.h, d.w, self.value(input));
        let shape = image_shape(&d, d.channels, d.h.div_ceil(2), d.w.div_ceil(2));
        let rg = self.requires_grad(input);
        Ok(self.push(shape, value, Op::MaxPool2 { input, argmax }, rg))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.value(input).iter().map(|&x| x.max(0.0)).collect();
        let rg = self.requires_grad(input);
        self.push(self.shape(input).to_vec(), value, Op::Relu(input), rg)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let value = self.value(input).iter().map(|&x| sigmoid(x)).collect();
        let rg = self.requires_grad(input);
        self.push(self.shape(input).to_vec(), value, Op::Sigmoid(input), rg)
    }

    /// Corner-aligned bilinear upsampling to `(height, width)`.
    pub fn upsample_bilinear(&mut self, input: Var, target: (usize, usize)) -> Result<Var> {
        let d = image_dims("upsample_bilinear", self.shape(input))?;
        let (th, tw) = target;
        if th < d.h {
            return Err(Error::shape("upsample_bilinear", format!("target height {th} < input height {}", d.h)));
        }
        if tw < d.w {
            return Err(Error::shape("upsample_bilinear", format!("target width {tw} < input width {}", d.w)));
        }
        let planes = d.batch * d.channels;
        let value = kernels::bilinear_forward(planes, (d.h, d.w), target, self.value(input));
        let rg = self.requires_grad(input);
        Ok(self.push(
            image_shape(&d, d.channels, th, tw),
            value,
            Op::Bilinear {
                input,
                planes,
                from: (d.h, d.w),
                to: target,
            },
            rg,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("operands {:?} and {:?} differ", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, make: fn(Var, Var) -> Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(self.shape(a).to_vec(), value, make(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).iter().map(|&x| x * c).collect();
        let rg = self.requires_grad(a);
        self.push(self.shape(a).to_vec(), value, Op::Scale(a, c), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.requires_grad(a);
        self.push(vec![1], vec![s], Op::Sum(a), rg)
    }

    /// Concatenates `[c_i, h, w]` (or batched) inputs along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat_channels", "no inputs"))?;
        let d0 = image_dims("concat_channels", self.shape(*first))?;
        let mut total = 0;
        for &v in inputs {
            let d = image_dims("concat_channels", self.shape(v))?;
            if d.batched != d0.batched || d.batch != d0.batch || d.h != d0.h || d.w != d0.w {
                return Err(Error::shape(
                    "concat_channels",
                    format!("inputs {:?} and {:?} differ outside the channel axis", self.shape(*first), self.shape(v)),
                ));
            }
            total += d.channels;
        }
        let plane = d0.h * d0.w;
        let mut value = Vec::with_capacity(d0.batch * total * plane);
        for n in 0..d0.batch {
            for &v in inputs {
                let c = self.shape(v)[self.shape(v).len() - 3];
                value.extend_from_slice(&self.value(v)[n * c * plane..(n + 1) * c * plane]);
            }
        }
        let rg = inputs.iter().any(|&v| self.requires_grad(v));
        Ok(self.push(
            image_shape(&d0, total, d0.h, d0.w),
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                batch: d0.batch,
                plane,
            },
            rg,
        ))
    }

    /// Rescales each sample of `resampled` so its sum equals the matching
    /// sample sum of `source`. A sample whose resampled sum is zero maps to zero.
    pub fn conserve_counts(&mut self, source: Var, resampled: Var) -> Result<Var> {
        let ds = image_dims("conserve_counts", self.shape(source))?;
        let dr = image_dims("conserve_counts", self.shape(resampled))?;
        if ds.batch != dr.batch || ds.batched != dr.batched {
            return Err(Error::shape(
                "conserve_counts",
                format!("batch of {:?} vs {:?}", self.shape(source), self.shape(resampled)),
            ));
        }
        let batch = ds.batch;
        let s_len = self.value(source).len() / batch;
        let r_len = self.value(resampled).len() / batch;
        let mut sums = Vec::with_capacity(batch);
        let mut value = Vec::with_capacity(batch * r_len);
        for n in 0..batch {
            let s: f64 = self.value(source)[n * s_len..(n + 1) * s_len].iter().sum();
            let r_vals = &self.value(resampled)[n * r_len..(n + 1) * r_len];
            let r: f64 = r_vals.iter().sum();
            let f = if r == 0.0 { 0.0 } else { s / r };
            value.extend(r_vals.iter().map(|&x| x * f));
            sums.push((s, r));
        }
        let rg = self.requires_grad(source) || self.requires_grad(resampled);
        Ok(self.push(
            self.shape(resampled).to_vec(),
            value,
            Op::ConserveCounts {
                source,
                resampled,
                batch,
                sums,
            },
            rg,
        ))
    }

    /// Populates gradients of `loss` with respect to every differentiable node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.node(loss).value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.node(loss).shape),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.propagate(i, &g, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                batch,
            } => {
                let cg = kernels::conv2d_backward(
                    geom,
                    *batch,
                    self.value(*input),
                    self.value(*weight),
                    g,
                    rg(*input),
                    rg(*weight),
                    rg(*bias),
                );                if let Some(x) = cg.input {
                    accumulate(&mut grads[input.0], x);
                }
                if let Some(x) = cg.weight {
                    accumulate(&mut grads[weight.0], x);
                }
                if let Some(x) = cg.bias {
                    accumulate(&mut grads[bias.0], x);
                }
            }
            Op::MaxPool2 { input, argmax } => {
                let mut gi = vec![0.0; self.value(*input).len()];
                for (&idx, &v) in argmax.iter().zip(g) {
                    gi[idx] += v;
                }
                accumulate(&mut grads[input.0], gi);
            }
            Op::Relu(input) => {
                let gi = self
                    .value(*input)
                    .iter()
                    .zip(g)
                    .map(|(&x, &v)| if x > 0.0 { v } else { 0.0 })
                    .collect();
                accumulate(&mut grads[input.0], gi);
            }
            Op::Sigmoid(input) => {
                let gi = node.value.iter().zip(g).map(|(&s, &v)| v * s * (1.0 - s)).collect();
                accumulate(&mut grads[input.0], gi);
            }
            Op::Bilinear {
                input,
                planes,
                from,
                to,
            } => {
                let gi = kernels::bilinear_backward(*planes, *from, *to, g);
                accumulate(&mut grads[input.0], gi);
            }
            Op::Add(a, b) => {
                if rg(*a) {
                    accumulate(&mut grads[a.0], g.to_vec());
                }
                if rg(*b) {
                    accumulate(&mut grads[b.0], g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if rg(*a) {
                    accumulate(&mut grads[a.0], g.to_vec());
                }
                if rg(*b) {
                    accumulate(&mut grads[b.0], g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    let ga = g.iter().zip(self.value(*b)).map(|(v, y)| v * y).collect();
                    accumulate(&mut grads[a.0], ga);
                }
                if rg(*b) {
                    let gb = g.iter().zip(self.value(*a)).map(|(v, x)| v * x).collect();
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::Scale(a, c) => {
                accumulate(&mut grads[a.0], g.iter().map(|v| v * c).collect());
            }
            Op::Sum(a) => {
                accumulate(&mut grads[a.0], vec![g[0]; self.value(*a).len()]);
            }
            Op::Concat { inputs, batch, plane } => {
                let total: usize = node.shape[node.shape.len() - 3];
                let mut offset = 0;
                for &v in inputs {
                    let c = self.shape(v)[self.shape(v).len() - 3];
                    if rg(v) {
                        let mut gv = Vec::with_capacity(batch * c * plane);
                        for n in 0..*batch {
                            let start = (n * total + offset) * plane;
                            gv.extend_from_slice(&g[start..start + c * plane]);
                        }
                        accumulate(&mut grads[v.0], gv);
                    }
                    offset += c;
                }
            }
            Op::ConserveCounts {
                source,
                resampled,
                batch,
                sums,
            } => {
                // out = r * S/R per sample
                let r_vals = self.value(*resampled);
                let r_len = r_vals.len() / batch;
                let s_len = self.value(*source).len() / batch;
                let mut gs = rg(*source).then(|| vec![0.0; s_len * batch]);
                let mut gr = rg(*resampled).then(|| vec![0.0; r_len * batch]);
                for (n, &(s, r)) in sums.iter().enumerate() {
                    if r == 0.0 {
                        continue;
                    }
                    let gn = &g[n * r_len..(n + 1) * r_len];
                    let rn = &r_vals[n * r_len..(n + 1) * r_len];
                    let dot: f64 = gn.iter().zip(rn).map(|(a, b)| a * b).sum();
                    if let Some(gs) = gs.as_mut() {
                        gs[n * s_len..(n + 1) * s_len].fill(dot / r);
                    }
                    if let Some(gr) = gr.as_mut() {
                        let f = s / r;
                        let corr = dot * s / (r * r);
                        for (o, &v) in gr[n * r_len..(n + 1) * r_len].iter_mut().zip(gn) {
                            *o = v * f - corr;
                        }
                    }
                }
                if let Some(x) = gs {
                    accumulate(&mut grads[source.0], x);
                }
                if let Some(x) = gr {
                    accumulate(&mut grads[resampled.0], x);
                }
            }
        }
    }
}

/// Logistic function clamped to the open interval (0, 1).
pub(crate) fn sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}
