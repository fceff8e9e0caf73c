//! Network definition: config, weights, forward and backward passes.
//!
//! Tensors are f64 throughout and live in channel-first (C, H, W) layout
//! internally; the public input is (H, W, C) to match the imaging module.
//! Convolutions are valid (no padding), pooling is non-overlapping max with
//! spill rows floored away. The flat parameter order (per stage: conv
//! weights then bias; finally head weights then bias) is part of the weight
//! file format, so changing it requires a format version bump.

use ndarray::{Array1, Array2, Array3, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::DescriptorError;

/// One convolutional stage: `filters` output channels, square `kernel`,
/// `stride`, then a `pool`-sided max pool (1 disables pooling).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvStage {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pool: usize,
}

impl ConvStage {
    pub fn new(filters: usize, kernel: usize, stride: usize, pool: usize) -> Self {
        Self { filters, kernel, stride, pool }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative at the pre-activation, given both pre and post values.
    /// ReLU takes the zero branch at the kink.
    fn derivative(self, pre: f64, post: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - post * post,
        }
    }
}

/// Architecture of the shared tower. `input` is (height, width, channels).
/// The head is a single linear layer with no activation, so descriptor
/// entries are unbounded.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input: (usize, usize, usize),
    pub conv_stages: Vec<ConvStage>,
    pub activation: Activation,
    pub descriptor_dim: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::compact()
    }
}

impl NetworkConfig {
    /// The production tower: four conv stages from 224x224x3 down to a
    /// 3x3x64 feature block, then a linear head to 128 dimensions.
    /// About 99k parameters, small enough to train on CPU in seconds per
    /// epoch.
    pub fn compact() -> Self {
        Self {
            input: (
                crate::imaging::NET_INPUT_SIDE,
                crate::imaging::NET_INPUT_SIDE,
                3,
            ),
            conv_stages: vec![
                ConvStage::new(8, 7, 4, 2),
                ConvStage::new(16, 3, 1, 2),
                ConvStage::new(32, 3, 1, 2),
                ConvStage::new(64, 3, 1, 1),
            ],
            activation: Activation::Relu,
            descriptor_dim: 128,
        }
    }

    /// A small tower over 8x8x3 inputs, cheap enough for finite-difference
    /// gradient checks and hand-stepped oracles.
    pub fn tiny() -> Self {
        Self {
            input: (8, 8, 3),
            conv_stages: vec![ConvStage::new(4, 3, 1, 2), ConvStage::new(6, 2, 1, 1)],
            activation: Activation::Relu,
            descriptor_dim: 8,
        }
    }

    pub fn validate(&self) -> Result<(), DescriptorError> {
        let (h, w, c) = self.input;
        if h == 0 || w == 0 || c == 0 {
            return Err(DescriptorError::BadConfig(format!(
                "input dims must be nonzero, got {:?}",
                self.input
            )));
        }
        if self.descriptor_dim < 2 {
            return Err(DescriptorError::BadConfig(format!(
                "descriptor_dim must be at least 2, got {}",
                self.descriptor_dim
            )));
        }
        for (i, s) in self.conv_stages.iter().enumerate() {
            if s.filters == 0 || s.kernel == 0 || s.stride == 0 || s.pool == 0 {
                return Err(DescriptorError::BadConfig(format!(
                    "stage {i} has a zero field: {s:?}"
                )));
            }
        }
        self.stage_dims().map(|_| ())
    }

    /// Output shape (channels, height, width) after each conv stage.
    pub fn stage_dims(&self) -> Result<Vec<(usize, usize, usize)>, DescriptorError> {
        let (mut h, mut w, _) = self.input;
        let mut dims = Vec::with_capacity(self.conv_stages.len());
        for (i, s) in self.conv_stages.iter().enumerate() {
            if s.kernel > h || s.kernel > w {
                return Err(DescriptorError::BadConfig(format!(
                    "stage {i} kernel {} exceeds input {}x{}",
                    s.kernel, h, w
                )));
            }
            h = (h - s.kernel) / s.stride + 1;
            w = (w - s.kernel) / s.stride + 1;
            if s.pool > 1 {
                if s.pool > h || s.pool > w {
                    return Err(DescriptorError::BadConfig(format!(
                        "stage {i} pool {} exceeds feature map {}x{}",
                        s.pool, h, w
                    )));
                }
                h /= s.pool;
                w /= s.pool;
            }
            dims.push((s.filters, h, w));
        }
        Ok(dims)
    }

    /// Flattened feature length entering the linear head.
    pub fn feature_len(&self) -> Result<usize, DescriptorError> {
        match self.stage_dims()?.last() {
            Some(&(c, h, w)) => Ok(c * h * w),
            None => {
                let (h, w, c) = self.input;
                Ok(c * h * w)
            }
        }
    }

    pub fn parameter_count(&self) -> Result<usize, DescriptorError> {
        let mut n = 0;
        let mut cin = self.input.2;
        for s in &self.conv_stages {
            n += s.filters * cin * s.kernel * s.kernel + s.filters;
            cin = s.filters;
        }
        n += self.descriptor_dim * self.feature_len()? + self.descriptor_dim;
        Ok(n)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    /// (filters, in_channels, kernel, kernel)
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseParams {
    /// (descriptor_dim, feature_len)
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// The single shared parameter set. All three towers read from the same
/// instance, so weight sharing cannot drift.
#[derive(Clone, Debug, PartialEq)]
pub struct TowerWeights {
    pub config: NetworkConfig,
    pub init_seed: u64,
    pub conv: Vec<ConvParams>,
    pub head: DenseParams,
}

impl TowerWeights {
    /// Seeded random init: He-scaled normals for conv stages (good with
    /// ReLU), 1/sqrt(fan_in)-scaled normals for the head, zero biases.
    /// The draw order follows the flat parameter order.
    pub fn init(config: NetworkConfig, seed: u64) -> Result<Self, DescriptorError> {
        config.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut draw = |n: usize, std: f64| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * std
                })
                .collect()
        };
        let mut conv = Vec::with_capacity(config.conv_stages.len());
        let mut cin = config.input.2;
        for s in &config.conv_stages {
            let fan_in = cin * s.kernel * s.kernel;
            let std = (2.0 / fan_in as f64).sqrt();
            let w = draw(s.filters * fan_in, std);
            conv.push(ConvParams {
                weight: Array4::from_shape_vec((s.filters, cin, s.kernel, s.kernel), w)
                    .expect("conv shape"),
                bias: Array1::zeros(s.filters),
            });
            cin = s.filters;
        }
        let feat = config.feature_len()?;
        let std = (1.0 / feat as f64).sqrt();
        let w = draw(config.descriptor_dim * feat, std);
        let head = DenseParams {
            weight: Array2::from_shape_vec((config.descriptor_dim, feat), w)
                .expect("head shape"),
            bias: Array1::zeros(config.descriptor_dim),
        };
        Ok(Self { config, init_seed: seed, conv, head })
    }

    pub fn zeros(config: NetworkConfig) -> Result<Self, DescriptorError> {
        config.validate()?;
        let mut conv = Vec::with_capacity(config.conv_stages.len());
        let mut cin = config.input.2;
        for s in &config.conv_stages {
            conv.push(ConvParams {
                weight: Array4::zeros((s.filters, cin, s.kernel, s.kernel)),
                bias: Array1::zeros(s.filters),
            });
            cin = s.filters;
        }
        let feat = config.feature_len()?;
        let head = DenseParams {
            weight: Array2::zeros((config.descriptor_dim, feat)),
            bias: Array1::zeros(config.descriptor_dim),
        };
        Ok(Self { config, init_seed: 0, conv, head })
    }

    /// Parameter tensors in the declared flat order.
    pub(super) fn tensors(&self) -> Vec<&[f64]> {
        let mut v = Vec::with_capacity(self.conv.len() * 2 + 2);
        for p in &self.conv {
            v.push(p.weight.as_slice().expect("standard layout"));
            v.push(p.bias.as_slice().expect("standard layout"));
        }
        v.push(self.head.weight.as_slice().expect("standard layout"));
        v.push(self.head.bias.as_slice().expect("standard layout"));
        v
    }

    pub(super) fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = Vec::with_capacity(self.conv.len() * 2 + 2);
        for p in &mut self.conv {
            v.push(p.weight.as_slice_mut().expect("standard layout"));
            v.push(p.bias.as_slice_mut().expect("standard layout"));
        }
        v.push(self.head.weight.as_slice_mut().expect("standard layout"));
        v.push(self.head.bias.as_slice_mut().expect("standard layout"));
        v
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Read one parameter by flat index. Panics when out of range.
    pub fn param(&self, mut idx: usize) -> f64 {
        for t in self.tensors() {
            if idx < t.len() {
                return t[idx];
            }
            idx -= t.len();
        }
        panic!("parameter index out of range");
    }

    pub fn param_mut(&mut self, mut idx: usize) -> &mut f64 {
        for t in self.tensors_mut() {
            if idx < t.len() {
                return &mut t[idx];
            }
            idx -= t.len();
        }
        panic!("parameter index out of range");
    }

    /// Plain SGD step: w -= lr * g.
    pub fn apply_step(&mut self, grad: &GradientSet, lr: f64) {
        for (w, g) in self.tensors_mut().into_iter().zip(grad.tensors()) {
            for (wi, gi) in w.iter_mut().zip(g.iter()) {
                *wi -= lr * gi;
            }
        }
    }

    /// Momentum SGD: v = momentum * v + g; w -= lr * v.
    pub fn apply_momentum_step(
        &mut self,
        velocity: &mut GradientSet,
        grad: &GradientSet,
        lr: f64,
        momentum: f64,
    ) {
        for ((w, v), g) in self
            .tensors_mut()
            .into_iter()
            .zip(velocity.tensors_mut())
            .zip(grad.tensors())
        {
            for ((wi, vi), gi) in w.iter_mut().zip(v.iter_mut()).zip(g.iter()) {
                *vi = momentum * *vi + gi;
                *wi -= lr * *vi;
            }
        }
    }

    /// Exact bit-level equality, including distinguishing -0.0 from 0.0.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        if self.config != other.config {
            return false;
        }
        let a = self.tensors();
        let b = other.tensors();
        a.len() == b.len()
            && a.iter().zip(&b).all(|(x, y)| {
                x.len() == y.len()
                    && x.iter().zip(y.iter()).all(|(p, q)| p.to_bits() == q.to_bits())
            })
    }
}

/// Gradients (or momentum velocities) in the same shape as the weights.
#[derive(Clone, Debug)]
pub struct GradientSet {
    pub conv: Vec<ConvParams>,
    pub head: DenseParams,
}

impl GradientSet {
    pub fn zeros_like(w: &TowerWeights) -> Self {
        Self {
            conv: w
                .conv
                .iter()
                .map(|p| ConvParams {
                    weight: Array4::zeros(p.weight.raw_dim()),
                    bias: Array1::zeros(p.bias.raw_dim()),
                })
                .collect(),
            head: DenseParams {
                weight: Array2::zeros(w.head.weight.raw_dim()),
                bias: Array1::zeros(w.head.bias.raw_dim()),
            },
        }
    }

    pub(super) fn tensors(&self) -> Vec<&[f64]> {
        let mut v = Vec::with_capacity(self.conv.len() * 2 + 2);
        for p in &self.conv {
            v.push(p.weight.as_slice().expect("standard layout"));
            v.push(p.bias.as_slice().expect("standard layout"));
        }
        v.push(self.head.weight.as_slice().expect("standard layout"));
        v.push(self.head.bias.as_slice().expect("standard layout"));
        v
    }

    pub(super) fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = Vec::with_capacity(self.conv.len() * 2 + 2);
        for p in &mut self.conv {
            v.push(p.weight.as_slice_mut().expect("standard layout"));
            v.push(p.bias.as_slice_mut().expect("standard layout"));
        }
        v.push(self.head.weight.as_slice_mut().expect("standard layout"));
        v.push(self.head.bias.as_slice_mut().expect("standard layout"));
        v
    }

    pub fn add_assign(&mut self, other: &GradientSet) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            for x in t.iter_mut() {
                *x *= factor;
            }
        }
    }

    pub fn param(&self, mut idx: usize) -> f64 {
        for t in self.tensors() {
            if idx < t.len() {
                return t[idx];
            }
            idx -= t.len();
        }
        panic!("parameter index out of range");
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }
}

/// One descriptor. Entries are unbounded but always finite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescriptorVector(pub Vec<f64>);

impl DescriptorVector {
    pub fn from_vec(v: Vec<f64>) -> Self {
        DescriptorVector(v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub(super) struct StageTrace {
    /// Pre-activation conv output.
    pre: Array3<f64>,
    /// Post-activation, before pooling.
    post: Array3<f64>,
    /// Stage output (pooled, or a copy of post when pool is 1).
    out: Array3<f64>,
    /// Flat index into `post` of each pooled maximum; None when pool is 1.
    argmax: Option<Vec<usize>>,
}

pub(super) struct ForwardTrace {
    input: Array3<f64>,
    stages: Vec<StageTrace>,
    features: Vec<f64>,
    pub(super) descriptor: Vec<f64>,
}

fn to_chw(input: &Array3<f64>) -> Array3<f64> {
    let (h, w, c) = input.dim();
    Array3::from_shape_fn((c, h, w), |(ci, y, x)| input[(y, x, ci)])
}

fn conv_forward(x: &Array3<f64>, p: &ConvParams, stride: usize) -> Array3<f64> {
    let (cin, hin, win) = x.dim();
    let (f, _, k, _) = p.weight.dim();
    let hout = (hin - k) / stride + 1;
    let wout = (win - k) / stride + 1;
    let xs = x.as_slice().expect("standard layout");
    let ws = p.weight.as_slice().expect("standard layout");
    let mut out = vec![0.0; f * hout * wout];
    for o in 0..f {
        let plane = &mut out[o * hout * wout..(o + 1) * hout * wout];
        plane.fill(p.bias[o]);
        for c in 0..cin {
            for u in 0..k {
                let wrow = &ws[((o * cin + c) * k + u) * k..][..k];
                for i in 0..hout {
                    let xrow = &xs[(c * hin + i * stride + u) * win..][..win];
                    let orow = &mut plane[i * wout..][..wout];
                    for (j, oj) in orow.iter_mut().enumerate() {
                        let xwin = &xrow[j * stride..][..k];
                        let mut acc = 0.0;
                        for v in 0..k {
                            acc += wrow[v] * xwin[v];
                        }
                        *oj += acc;
                    }
                }
            }
        }
    }
    Array3::from_shape_vec((f, hout, wout), out).expect("conv output shape")
}

fn pool_forward(x: &Array3<f64>, pool: usize) -> (Array3<f64>, Vec<usize>) {
    let (c, h, w) = x.dim();
    let hout = h / pool;
    let wout = w / pool;
    let xs = x.as_slice().expect("standard layout");
    let mut out = vec![0.0; c * hout * wout];
    let mut arg = vec![0usize; c * hout * wout];
    for ci in 0..c {
        for i in 0..hout {
            for j in 0..wout {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for u in 0..pool {
                    let base = (ci * h + i * pool + u) * w + j * pool;
                    for v in 0..pool {
                        let val = xs[base + v];
                        if val > best {
                            best = val;
                            best_idx = base + v;
                        }
                    }
                }
                let oi = (ci * hout + i) * wout + j;
                out[oi] = best;
                arg[oi] = best_idx;
            }
        }
    }
    (
        Array3::from_shape_vec((c, hout, wout), out).expect("pool output shape"),
        arg,
    )
}

pub(super) fn forward_trace(
    w: &TowerWeights,
    input: &Array3<f64>,
) -> Result<ForwardTrace, DescriptorError> {
    let (h, wd, c) = input.dim();
    if (h, wd, c) != w.config.input {
        return Err(DescriptorError::ShapeMismatch {
            expected: w.config.input,
            found: vec![h, wd, c],
        });
    }
    let chw = to_chw(input);
    let mut stages = Vec::with_capacity(w.conv.len());
    let mut cur = chw.clone();
    for (si, (p, s)) in w.conv.iter().zip(&w.config.conv_stages).enumerate() {
        let pre = conv_forward(&cur, p, s.stride);
        // Catch divergence at the activation itself: ReLU and max pooling
        // both swallow NaN, so a later check could miss it.
        if !pre.iter().all(|x| x.is_finite()) {
            return Err(DescriptorError::NonFinite {
                context: format!("stage {si} activations"),
            });
        }
        let post = pre.mapv(|x| w.config.activation.apply(x));
        let (out, argmax) = if s.pool > 1 {
            let (o, a) = pool_forward(&post, s.pool);
            (o, Some(a))
        } else {
            (post.clone(), None)
        };
        cur = out.clone();
        stages.push(StageTrace { pre, post, out, argmax });
    }
    let features: Vec<f64> = cur.as_slice().expect("standard layout").to_vec();
    let hw = &w.head;
    let dim = w.config.descriptor_dim;
    let feat = features.len();
    let hws = hw.weight.as_slice().expect("standard layout");
    let mut descriptor = vec![0.0; dim];
    for d in 0..dim {
        let row = &hws[d * feat..][..feat];
        let mut acc = hw.bias[d];
        for (r, f) in row.iter().zip(&features) {
            acc += r * f;
        }
        descriptor[d] = acc;
    }
    Ok(ForwardTrace { input: chw, stages, features, descriptor })
}

/// Run one tower. The descriptor is checked finite; non-finite activations
/// surface here as an error rather than propagating silently.
pub fn forward(w: &TowerWeights, input: &Array3<f64>) -> Result<DescriptorVector, DescriptorError> {
    let trace = forward_trace(w, input)?;
    if !trace.descriptor.iter().all(|x| x.is_finite()) {
        return Err(DescriptorError::NonFinite { context: "descriptor".into() });
    }
    Ok(DescriptorVector(trace.descriptor))
}

/// Backpropagate a gradient on the descriptor through one tower.
pub(super) fn backward(
    w: &TowerWeights,
    trace: &ForwardTrace,
    grad_descriptor: &[f64],
    out: &mut GradientSet,
) {
    let dim = w.config.descriptor_dim;
    let feat = trace.features.len();
    debug_assert_eq!(grad_descriptor.len(), dim);

    let hws = w.head.weight.as_slice().expect("standard layout");
    let ghw = out.head.weight.as_slice_mut().expect("standard layout");
    let ghb = out.head.bias.as_slice_mut().expect("standard layout");
    let mut gfeat = vec![0.0; feat];
    for d in 0..dim {
        let g = grad_descriptor[d];
        ghb[d] += g;
        let wrow = &hws[d * feat..][..feat];
        let grow = &mut ghw[d * feat..][..feat];
        for f in 0..feat {
            grow[f] += g * trace.features[f];
            gfeat[f] += wrow[f] * g;
        }
    }

    // Gradient flowing into the output of the last stage (or the input when
    // there are no conv stages).
    let mut gcur = gfeat;
    for (si, (p, s)) in w.conv.iter().zip(&w.config.conv_stages).enumerate().rev() {
        let st = &trace.stages[si];

        // Pool backward: route each pooled gradient to its argmax.
        let gpost: Vec<f64> = match &st.argmax {
            Some(arg) => {
                let mut gp = vec![0.0; st.post.len()];
                for (gi, &ai) in gcur.iter().zip(arg.iter()) {
                    gp[ai] += *gi;
                }
                gp
            }
            None => gcur,
        };

        // Activation backward.
        let pre = st.pre.as_slice().expect("standard layout");
        let post = st.post.as_slice().expect("standard layout");
        let gpre: Vec<f64> = gpost
            .iter()
            .zip(pre.iter().zip(post.iter()))
            .map(|(g, (&pr, &po))| g * w.config.activation.derivative(pr, po))
            .collect();

        // Conv backward.
        let xin: &Array3<f64> = if si == 0 { &trace.input } else { &trace.stages[si - 1].out };
        let (cin, hin, win) = xin.dim();
        let (f, _, k, _) = p.weight.dim();
        let (_, hout, wout) = st.pre.dim();
        let xs = xin.as_slice().expect("standard layout");
        let ws = p.weight.as_slice().expect("standard layout");
        let ConvParams { weight: gwt, bias: gbt } = &mut out.conv[si];
        let gw = gwt.as_slice_mut().expect("standard layout");
        let gb = gbt.as_slice_mut().expect("standard layout");
        let mut gx = vec![0.0; cin * hin * win];
        for o in 0..f {
            for i in 0..hout {
                let grow = &gpre[(o * hout + i) * wout..][..wout];
                for (j, &g) in grow.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    gb[o] += g;
                    for c in 0..cin {
                        for u in 0..k {
                            let wrow = &ws[((o * cin + c) * k + u) * k..][..k];
                            let gwrow = &mut gw[((o * cin + c) * k + u) * k..][..k];
                            let xbase = (c * hin + i * s.stride + u) * win + j * s.stride;
                            let xrow = &xs[xbase..][..k];
                            let gxrow = &mut gx[xbase..][..k];
                            for v in 0..k {
                                gwrow[v] += g * xrow[v];
                                gxrow[v] += wrow[v] * g;
                            }
                        }
                    }
                }
            }
        }
        gcur = gx;
    }
}
