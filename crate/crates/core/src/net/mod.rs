//! A small convolutional feature extractor with a linear classifier head and
//! hand-written reverse-mode gradients.
//!
//! The network maps an `H × W × C` input to a `d`-dimensional embedding
//! (conv → ReLU → 2×2 max-pool blocks, then ReLU dense layers, then a linear
//! embedding layer) and the embedding to `c` logits through one more dense
//! layer. Source and target domains may share one [`ModelParams`] or use two.

mod checkpoint;
mod layers;
mod optim;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint};
pub use optim::SgdMomentum;

use layers::ConvGeom;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl InputShape {
    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub channels: usize,
    pub kernel: usize,
}

/// Layer sizes of the network. Every conv block is conv → ReLU → max-pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arch {
    pub input: InputShape,
    pub conv: Vec<ConvSpec>,
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub class_count: usize,
}

impl Default for Arch {
    fn default() -> Self {
        Self {
            input: InputShape {
                height: 28,
                width: 28,
                channels: 1,
            },
            conv: vec![
                ConvSpec {
                    channels: 32,
                    kernel: 5,
                },
                ConvSpec {
                    channels: 64,
                    kernel: 5,
                },
            ],
            hidden: vec![512],
            embedding_dim: 128,
            class_count: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Layer {
    Conv { geom: ConvGeom, param: usize },
    Relu,
    MaxPool { channels: usize, h: usize, w: usize },
    Dense { n_in: usize, n_out: usize, param: usize },
}

/// Derived execution plan: the layer sequence producing the embedding, the
/// head, and the names and shapes of all parameter tensors.
#[derive(Debug, Clone, PartialEq)]
struct Plan {
    layers: Vec<Layer>,
    head_param: usize,
    tensors: Vec<(String, Vec<usize>, usize)>,
}

impl Arch {
    pub fn validate(&self) -> Result<()> {
        self.plan().map(|_| ())
    }

    fn plan(&self) -> Result<Plan> {
        let cfg = |msg: String| Err(Error::Config(msg));
        let InputShape {
            height,
            width,
            channels,
        } = self.input;
        if height == 0 || width == 0 || channels == 0 {
            return cfg(format!("input shape {height}x{width}x{channels} has a zero dimension"));
        }
        if self.embedding_dim == 0 || self.class_count == 0 {
            return cfg("embedding dimension and class count must be positive".into());
        }
        let mut layers = Vec::new();
        // (name, shape, fan_in); each layer owns a weight followed by a bias.
        let mut tensors: Vec<(String, Vec<usize>, usize)> = Vec::new();
        let (mut c, mut h, mut w) = (channels, height, width);
        for (i, spec) in self.conv.iter().enumerate() {
            if spec.channels == 0 || spec.kernel == 0 {
                return cfg(format!("conv layer {} has zero channels or kernel", i + 1));
            }
            if spec.kernel > h || spec.kernel > w {
                return cfg(format!(
                    "conv layer {} kernel {} exceeds its {h}x{w} input",
                    i + 1,
                    spec.kernel
                ));
            }
            let geom = ConvGeom {
                in_c: c,
                out_c: spec.channels,
                kernel: spec.kernel,
                in_h: h,
                in_w: w,
            };
            let param = tensors.len();
            tensors.push((format!("conv{}.weight", i + 1), vec![spec.channels, c, spec.kernel, spec.kernel], geom.patch()));
            tensors.push((format!("conv{}.bias", i + 1), vec![spec.channels], geom.patch()));
            layers.push(Layer::Conv { geom, param });
            layers.push(Layer::Relu);
            (c, h, w) = (spec.channels, geom.out_h(), geom.out_w());
            if h < 2 || w < 2 {
                return cfg(format!("conv layer {} output {h}x{w} is too small to pool", i + 1));
            }
            layers.push(Layer::MaxPool { channels: c, h, w });
            (h, w) = (h / 2, w / 2);
        }
        let mut width_in = c * h * w;
        let dense = |name: String, n_in: usize, n_out: usize, tensors: &mut Vec<(String, Vec<usize>, usize)>| {
            let param = tensors.len();
            tensors.push((format!("{name}.weight"), vec![n_in, n_out], n_in));
            tensors.push((format!("{name}.bias"), vec![n_out], n_in));
            Layer::Dense { n_in, n_out, param }
        };
        for (i, &n) in self.hidden.iter().enumerate() {
            if n == 0 {
                return cfg(format!("hidden layer {} has zero units", i + 1));
            }
            layers.push(dense(format!("fc{}", i + 1), width_in, n, &mut tensors));
            layers.push(Layer::Relu);
            width_in = n;
        }
        layers.push(dense("embed".into(), width_in, self.embedding_dim, &mut tensors));
        let head_param = tensors.len();
        dense("head".into(), self.embedding_dim, self.class_count, &mut tensors);
        Ok(Plan {
            layers,
            head_param,
            tensors,
        })
    }
}

static STAMP: AtomicU64 = AtomicU64::new(1);

fn next_stamp() -> u64 {
    STAMP.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Parameters of one network. Shapes are fixed by the [`Arch`].
#[derive(Debug, Clone)]
pub struct ModelParams {
    arch: Arch,
    plan: Plan,
    tensors: Vec<Tensor>,
    /// Changes whenever the values change; forward results remember it.
    stamp: u64,
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.tensors == other.tensors
    }
}

/// Fan-in-scaled uniform initialisation: weights ~ U(-√(6/fan_in), √(6/fan_in)),
/// biases zero. Deterministic in `seed`.
pub fn init_params(seed: u64, arch: &Arch) -> Result<ModelParams> {
    let plan = arch.plan()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = plan
        .tensors
        .iter()
        .map(|(name, shape, fan_in)| {
            let n = shape.iter().product();
            let data = if name.ends_with(".bias") {
                vec![0.0; n]
            } else {
                let bound = (6.0 / *fan_in as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            };
            Tensor {
                name: name.clone(),
                shape: shape.clone(),
                data,
            }
        })
        .collect();
    Ok(ModelParams {
        arch: arch.clone(),
        plan,
        tensors,
        stamp: next_stamp(),
    })
}

impl ModelParams {
    /// Rebuilds parameters from named tensors, checking names and shapes.
    pub fn from_tensors(arch: &Arch, tensors: Vec<Tensor>) -> Result<Self> {
        let plan = arch.plan()?;
        if tensors.len() != plan.tensors.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, got {}",
                plan.tensors.len(),
                tensors.len()
            )));
        }
        for (t, (name, shape, _)) in tensors.iter().zip(&plan.tensors) {
            if &t.name != name || &t.shape != shape || t.data.len() != shape.iter().product::<usize>() {
                return Err(Error::Shape(format!(
                    "tensor {} {:?} does not match expected {name} {shape:?}",
                    t.name, t.shape
                )));
            }
        }
        let p = Self {
            arch: arch.clone(),
            plan,
            tensors,
            stamp: next_stamp(),
        };
        if !p.is_finite() {
            return Err(Error::Numeric("parameters contain non-finite values".into()));
        }
        Ok(p)
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Mutable access to the flat value buffers. Invalidates outstanding
    /// forward results.
    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.stamp = next_stamp();
        self.tensors.iter_mut().map(|t| t.data.as_mut_slice())
    }

    pub fn values(&self) -> impl Iterator<Item = &[f64]> {
        self.tensors.iter().map(|t| t.data.as_slice())
    }

    /// Order-sensitive 64-bit FNV-1a digest of every parameter bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.values().flatten() {
            for b in v.to_bits().to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients(self.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect())
    }

    pub(crate) fn same_layout(&self, other: &ModelParams) -> bool {
        self.arch == other.arch
    }

    fn data(&self, idx: usize) -> &[f64] {
        &self.tensors[idx].data
    }
}

/// Per-parameter gradient buffers laid out like [`ModelParams::tensors`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

impl Gradients {
    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.0.iter_mut().flatten().for_each(|v| *v *= k);
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.0.iter().flatten().copied().collect()
    }
}

/// A batch of images flattened to `len × (H·W·C)` values in HWC order.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    shape: InputShape,
    len: usize,
    data: Vec<f64>,
}

impl Batch {
    pub fn new(shape: InputShape, data: Vec<f64>) -> Result<Self> {
        let per = shape.len();
        if per == 0 || data.len() % per != 0 {
            return Err(Error::Shape(format!(
                "{} values do not form whole {}x{}x{} inputs",
                data.len(),
                shape.height,
                shape.width,
                shape.channels
            )));
        }
        Ok(Self {
            shape,
            len: data.len() / per,
            data,
        })
    }

    pub fn from_images<'a>(images: impl IntoIterator<Item = &'a Image>) -> Result<Self> {
        let mut shape = None;
        let mut data = Vec::new();
        for img in images {
            let (height, width, channels) = img.shape();
            let s = InputShape {
                height,
                width,
                channels,
            };
            if *shape.get_or_insert(s) != s {
                return Err(Error::Shape("batch images differ in shape".into()));
            }
            data.extend(img.pixels().iter().map(|&p| f64::from(p)));
        }
        let shape = shape.ok_or_else(|| Error::Shape("empty batch".into()))?;
        Self::new(shape, data)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn shape(&self) -> InputShape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

#[derive(Debug, Clone)]
enum LayerCache {
    Conv(Vec<f64>),
    Relu(Vec<bool>),
    Pool(Vec<u32>),
    Dense(Vec<f64>),
}

#[derive(Debug, Clone)]
struct Cache {
    stamp: u64,
    layers: Vec<LayerCache>,
    in_lens: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct ForwardResult {
    pub embeddings: Matrix,
    pub logits: Matrix,
    cache: Option<Cache>,
}

impl ForwardResult {
    /// Drops the backward-pass intermediates.
    pub fn detach(mut self) -> Self {
        self.cache = None;
        self
    }

    pub fn batch_len(&self) -> usize {
        self.embeddings.rows()
    }
}

fn hwc_to_chw(shape: InputShape, batch: usize, x: &[f64]) -> Vec<f64> {
    let InputShape {
        height: h,
        width: w,
        channels: c,
    } = shape;
    if c == 1 {
        return x.to_vec();
    }
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        let base = b * h * w * c;
        for y in 0..h {
            for xx in 0..w {
                for ch in 0..c {
                    out[base + (ch * h + y) * w + xx] = x[base + (y * w + xx) * c + ch];
                }
            }
        }
    }
    out
}

/// Runs the network and keeps the intermediates required by [`backward`].
pub fn forward(params: &ModelParams, batch: &Batch) -> Result<ForwardResult> {
    run(params, batch, true)
}

/// Runs the network without retaining intermediates.
pub fn infer(params: &ModelParams, batch: &Batch) -> Result<ForwardResult> {
    run(params, batch, false)
}

fn run(params: &ModelParams, batch: &Batch, keep: bool) -> Result<ForwardResult> {
    if batch.shape() != params.arch.input {
        return Err(Error::Shape(format!(
            "batch input {:?} does not match network input {:?}",
            batch.shape(),
            params.arch.input
        )));
    }
    let n = batch.len();
    let mut x = hwc_to_chw(batch.shape(), n, batch.data());
    let mut caches = Vec::with_capacity(params.plan.layers.len());
    let mut in_lens = Vec::with_capacity(params.plan.layers.len());
    for layer in &params.plan.layers {
        in_lens.push(x.len());
        match *layer {
            Layer::Conv { geom, param } => {
                let (y, cols) = layers::conv_forward(&geom, n, &x, params.data(param), params.data(param + 1));
                if keep {
                    caches.push(LayerCache::Conv(cols));
                }
                x = y;
            }
            Layer::Relu => {
                let mask = layers::relu_forward(&mut x);
                if keep {
                    caches.push(LayerCache::Relu(mask));
                }
            }
            Layer::MaxPool { channels, h, w } => {
                let (y, arg) = layers::maxpool_forward(channels, h, w, n, &x);
                if keep {
                    caches.push(LayerCache::Pool(arg));
                }
                x = y;
            }
            Layer::Dense { n_in, n_out, param } => {
                let y = layers::dense_forward(n, n_in, n_out, &x, params.data(param), params.data(param + 1));
                if keep {
                    caches.push(LayerCache::Dense(std::mem::take(&mut x)));
                }
                x = y;
            }
        }
    }
    let (d, c) = (params.arch.embedding_dim, params.arch.class_count);
    let hp = params.plan.head_param;
    let logits = layers::dense_forward(n, d, c, &x, params.data(hp), params.data(hp + 1));
    let result = ForwardResult {
        embeddings: Matrix::from_vec(n, d, x)?,
        logits: Matrix::from_vec(n, c, logits)?,
        cache: keep.then(|| Cache {
            stamp: params.stamp,
            layers: caches,
            in_lens,
        }),
    };
    if !result.embeddings.is_finite() || !result.logits.is_finite() {
        return Err(Error::Numeric("forward pass produced non-finite outputs".into()));
    }
    Ok(result)
}

/// Reverse-mode gradient of `<grad_embeddings, E> + <grad_logits, logits>`
/// with respect to every parameter.
pub fn backward(
    params: &ModelParams,
    result: &ForwardResult,
    grad_embeddings: &Matrix,
    grad_logits: &Matrix,
) -> Result<Gradients> {
    let cache = result
        .cache
        .as_ref()
        .ok_or_else(|| Error::State("forward result carries no cached intermediates".into()))?;
    if cache.stamp != params.stamp {
        return Err(Error::State(
            "parameters changed since the forward pass; cached intermediates are stale".into(),
        ));
    }
    if grad_embeddings.shape() != result.embeddings.shape() || grad_logits.shape() != result.logits.shape() {
        return Err(Error::Shape(format!(
            "cotangent shapes {:?}/{:?} do not match outputs {:?}/{:?}",
            grad_embeddings.shape(),
            grad_logits.shape(),
            result.embeddings.shape(),
            result.logits.shape()
        )));
    }
    let n = result.batch_len();
    let (d, c) = (params.arch.embedding_dim, params.arch.class_count);
    let mut grads = params.zero_grads();
    let hp = params.plan.head_param;
    let (gw, rest) = grads.0.split_at_mut(hp + 1);
    let mut dx = layers::dense_backward(
        n,
        d,
        c,
        result.embeddings.as_slice(),
        params.data(hp),
        grad_logits.as_slice(),
        &mut gw[hp],
        &mut rest[0],
        true,
    )
    .expect("input gradient requested");
    for (v, g) in dx.iter_mut().zip(grad_embeddings.as_slice()) {
        *v += g;
    }
    let last = params.plan.layers.len();
    for (i, (layer, lc)) in params.plan.layers.iter().zip(&cache.layers).enumerate().rev() {
        let want_input = i > 0;
        match (*layer, lc) {
            (Layer::Conv { geom, param }, LayerCache::Conv(cols)) => {
                let (w, b) = split_pair(&mut grads.0, param);
                dx = layers::conv_backward(&geom, n, cols, params.data(param), &dx, w, b, want_input)
                    .unwrap_or_default();
            }
            (Layer::Relu, LayerCache::Relu(mask)) => layers::relu_backward(mask, &mut dx),
            (Layer::MaxPool { .. }, LayerCache::Pool(arg)) => {
                dx = layers::maxpool_backward(cache.in_lens[i], arg, &dx);
            }
            (Layer::Dense { n_in, n_out, param }, LayerCache::Dense(input)) => {
                let (w, b) = split_pair(&mut grads.0, param);
                dx = layers::dense_backward(n, n_in, n_out, input, params.data(param), &dx, w, b, want_input)
                    .unwrap_or_default();
            }
            _ => {
                return Err(Error::State(format!(
                    "cache entry {i} of {last} does not match its layer"
                )))
            }
        }
    }
    Ok(grads)
}

fn split_pair(g: &mut [Vec<f64>], idx: usize) -> (&mut [f64], &mut [f64]) {
    let (a, b) = g.split_at_mut(idx + 1);
    (&mut a[idx], &mut b[0])
}
