//! VGG19 convolutional trunk: weight loading, forward pass with named
//! captures, and backpropagation of per-layer feature gradients to the input.
//!
//! Captured activations are the rectified outputs of each convolution, so
//! `conv3_1` refers to the tensor after its ReLU. Fully connected layers are
//! never loaded.

use std::collections::BTreeMap;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result, WeightsError};
use crate::scalar::Scalar;
use crate::tensor::{self, ConvSpec, Tensor};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"VGGW";
pub const WEIGHTS_VERSION: u32 = 1;

/// Mean RGB of the ImageNet training set on the 0..255 scale.
pub const IMAGENET_MEAN: [f32; 3] = [123.68, 116.779, 103.939];

/// `(feature maps, convolutions)` for each of the five blocks.
const BLOCKS: [(usize, usize); 5] = [(64, 2), (128, 2), (256, 4), (512, 4), (512, 4)];

pub const CONV_LAYERS: [&str; 16] = [
    "conv1_1", "conv1_2", "conv2_1", "conv2_2", "conv3_1", "conv3_2", "conv3_3", "conv3_4",
    "conv4_1", "conv4_2", "conv4_3", "conv4_4", "conv5_1", "conv5_2", "conv5_3", "conv5_4",
];

pub const DEFAULT_CONTENT_LAYERS: [&str; 1] = ["conv4_2"];
pub const DEFAULT_STYLE_LAYERS: [&str; 5] = ["conv1_1", "conv2_1", "conv3_1", "conv4_1", "conv5_1"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PoolMode {
    #[default]
    Max,
    Average,
}

/// Static description of one convolution in the trunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerInfo {
    pub name: &'static str,
    /// 1-based block number.
    pub block: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// True for the first convolution of blocks 2..5, which is preceded by a pool.
    pub after_pool: bool,
}

pub fn architecture() -> Vec<LayerInfo> {
    let mut out = Vec::with_capacity(16);
    let mut in_c = 3;
    let mut idx = 0;
    for (b, &(maps, convs)) in BLOCKS.iter().enumerate() {
        for i in 0..convs {
            out.push(LayerInfo {
                name: CONV_LAYERS[idx],
                block: b + 1,
                in_channels: in_c,
                out_channels: maps,
                after_pool: b > 0 && i == 0,
            });
            in_c = maps;
            idx += 1;
        }
    }
    out
}

pub fn layer_index(name: &str) -> Result<usize> {
    CONV_LAYERS
        .iter()
        .position(|&l| l == name)
        .ok_or_else(|| Error::UnknownLayer(name.to_string()))
}

/// Number of 2x2 pooling steps between the input and `layer`.
pub fn pool_depth(layer: &str) -> Result<usize> {
    Ok(architecture()[layer_index(layer)?].block - 1)
}

#[derive(Debug, Clone)]
pub struct VggModel<T> {
    convs: Vec<ConvSpec<T>>,
    mean: [f32; 3],
    pool: PoolMode,
}

/// Activations captured at named layers, each `N x H x W` (read as an
/// `N x D` feature matrix with `D = H * W`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCapture<T> {
    layers: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> FeatureCapture<T> {
    pub fn new(layers: BTreeMap<String, Tensor<T>>) -> Self {
        Self { layers }
    }

    pub fn get(&self, layer: &str) -> Result<&Tensor<T>> {
        self.layers
            .get(layer)
            .ok_or_else(|| Error::UnknownLayer(layer.to_string()))
    }

    /// `(N, D)`: feature-map count and feature-map size.
    pub fn dims(&self, layer: &str) -> Result<(usize, usize)> {
        let (n, h, w) = self.get(layer)?.dims3()?;
        Ok((n, h * w))
    }

    pub fn layers(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.layers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

/// Intermediate tensors retained by [`VggModel::forward_traced`].
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    input_shape: Vec<usize>,
    conv_inputs: Vec<Tensor<T>>,
    pre_activations: Vec<Tensor<T>>,
    pool_inputs: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> VggModel<T> {
    fn from_parts(convs: Vec<ConvSpec<T>>, mean: [f32; 3]) -> Self {
        Self {
            convs,
            mean,
            pool: PoolMode::Max,
        }
    }

    /// All-zero weights and biases.
    pub fn zeros() -> Self {
        let convs = architecture()
            .iter()
            .map(|l| {
                ConvSpec::new(
                    Tensor::zeros(&[l.out_channels, l.in_channels, 3, 3]),
                    Tensor::zeros(&[l.out_channels]),
                )
                .expect("architecture shapes are valid")
            })
            .collect();
        Self::from_parts(convs, IMAGENET_MEAN)
    }

    /// He-initialized weights drawn from a seeded generator. Useful for tests
    /// and for exercising the pipeline without a pretrained checkpoint.
    pub fn synthetic(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let convs = architecture()
            .iter()
            .map(|l| {
                let fan_in = (l.in_channels * 9) as f64;
                let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
                let shape = [l.out_channels, l.in_channels, 3, 3];
                let kernel = Tensor::from_fn(&shape, |_| {
                    T::from_f64_lossy(normal.sample(&mut rng) as f32 as f64)
                });
                ConvSpec::new(kernel, Tensor::zeros(&[l.out_channels]))
                    .expect("architecture shapes are valid")
            })
            .collect();
        Self::from_parts(convs, IMAGENET_MEAN)
    }

    pub fn with_pool_mode(mut self, pool: PoolMode) -> Self {
        self.pool = pool;
        self
    }

    pub fn pool_mode(&self) -> PoolMode {
        self.pool
    }

    pub fn mean(&self) -> [f32; 3] {
        self.mean
    }

    pub fn conv(&self, layer: &str) -> Result<&ConvSpec<T>> {
        Ok(&self.convs[layer_index(layer)?])
    }

    pub fn load_weights(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    /// Parses the weight format. Nothing is returned unless every one of the
    /// 16 convolutions was read and shape-checked.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        fn truncated(what: impl Into<String>) -> impl FnOnce(std::io::Error) -> WeightsError {
            let what = what.into();
            move |_| WeightsError::Truncated { what }
        }

        let mut cur = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        cur.read_exact(&mut magic).map_err(truncated("header"))?;
        if &magic != WEIGHTS_MAGIC {
            return Err(WeightsError::BadMagic { found: magic }.into());
        }
        let version = cur.read_u32::<LittleEndian>().map_err(truncated("header"))?;
        if version != WEIGHTS_VERSION {
            return Err(WeightsError::UnsupportedVersion(version).into());
        }
        let mut mean = [0f32; 3];
        cur.read_f32_into::<LittleEndian>(&mut mean)
            .map_err(truncated("channel means"))?;

        let arch = architecture();
        let mut slots: Vec<Option<ConvSpec<T>>> = vec![None; arch.len()];
        while (cur.position() as usize) < bytes.len() {
            let name_len = cur.read_u16::<LittleEndian>().map_err(truncated("layer header"))?;
            let mut name = vec![0u8; name_len as usize];
            cur.read_exact(&mut name).map_err(truncated("layer name"))?;
            let name = String::from_utf8(name).map_err(|_| WeightsError::BadLayerName)?;
            let idx = CONV_LAYERS
                .iter()
                .position(|&l| l == name)
                .ok_or_else(|| WeightsError::UnexpectedLayer(name.clone()))?;
            if slots[idx].is_some() {
                return Err(WeightsError::DuplicateLayer(name).into());
            }
            let info = arch[idx];

            let mut dims = [0u32; 4];
            cur.read_u32_into::<LittleEndian>(&mut dims)
                .map_err(truncated(format!("layer {name} kernel shape")))?;
            let dims: Vec<usize> = dims.iter().map(|&d| d as usize).collect();
            let expected = vec![info.out_channels, info.in_channels, 3, 3];
            if dims != expected {
                return Err(WeightsError::ShapeMismatch {
                    layer: name,
                    part: "kernel",
                    expected,
                    actual: dims,
                }
                .into());
            }
            let mut kernel = vec![0f32; dims.iter().product()];
            cur.read_f32_into::<LittleEndian>(&mut kernel)
                .map_err(truncated(format!("layer {name} kernel")))?;

            let bias_len = cur
                .read_u32::<LittleEndian>()
                .map_err(truncated(format!("layer {name} bias length")))?
                as usize;
            if bias_len != info.out_channels {
                return Err(WeightsError::ShapeMismatch {
                    layer: name,
                    part: "bias",
                    expected: vec![info.out_channels],
                    actual: vec![bias_len],
                }
                .into());
            }
            let mut bias = vec![0f32; bias_len];
            cur.read_f32_into::<LittleEndian>(&mut bias)
                .map_err(truncated(format!("layer {name} bias")))?;

            let cast = |v: Vec<f32>| v.into_iter().map(|x| T::from_f64_lossy(x as f64)).collect();
            slots[idx] = Some(ConvSpec::new(
                Tensor::new(dims, cast(kernel))?,
                Tensor::new(vec![bias_len], cast(bias))?,
            )?);
        }

        let mut convs = Vec::with_capacity(slots.len());
        for (slot, name) in slots.into_iter().zip(CONV_LAYERS) {
            convs.push(slot.ok_or_else(|| WeightsError::MissingLayer(name.to_string()))?);
        }
        Ok(Self::from_parts(convs, mean))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(WEIGHTS_MAGIC)?;
        w.write_u32::<LittleEndian>(WEIGHTS_VERSION)?;
        for m in self.mean {
            w.write_f32::<LittleEndian>(m)?;
        }
        for (spec, name) in self.convs.iter().zip(CONV_LAYERS) {
            w.write_u16::<LittleEndian>(name.len() as u16)?;
            w.write_all(name.as_bytes())?;
            for &d in spec.kernel.shape() {
                w.write_u32::<LittleEndian>(d as u32)?;
            }
            for &v in spec.kernel.data() {
                w.write_f32::<LittleEndian>(v.as_f64() as f32)?;
            }
            w.write_u32::<LittleEndian>(spec.bias.len() as u32)?;
            for &v in spec.bias.data() {
                w.write_f32::<LittleEndian>(v.as_f64() as f32)?;
            }
        }
        Ok(())
    }

    pub fn save_weights(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    /// `H x W x 3` image in `[0, 1]` to the network's `3 x H x W` input:
    /// scaled to `[0, 255]` with the per-channel mean removed.
    pub fn preprocess(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let (h, w) = image_dims(image)?;
        let scale = T::from_f64_lossy(255.0);
        let mut out = vec![T::zero(); 3 * h * w];
        for (p, px) in image.data().chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * h * w + p] = px[c] * scale - T::from_f64_lossy(self.mean[c] as f64);
            }
        }
        Tensor::new(vec![3, h, w], out)
    }

    /// Inverse of [`Self::preprocess`].
    pub fn postprocess(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let (c, h, w) = input.dims3()?;
        if c != 3 {
            return Err(Error::InvalidShape {
                shape: input.shape().to_vec(),
                reason: "network input must have 3 channels".into(),
            });
        }
        let scale = T::from_f64_lossy(255.0);
        let mut out = vec![T::zero(); 3 * h * w];
        for c in 0..3 {
            let m = T::from_f64_lossy(self.mean[c] as f64);
            for p in 0..h * w {
                out[p * 3 + c] = (input.data()[c * h * w + p] + m) / scale;
            }
        }
        Tensor::new(vec![h, w, 3], out)
    }

    /// Pulls a gradient w.r.t. the network input back to the `H x W x 3` image.
    pub fn preprocess_grad(&self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let (c, h, w) = grad.dims3()?;
        if c != 3 {
            return Err(Error::InvalidShape {
                shape: grad.shape().to_vec(),
                reason: "network input gradient must have 3 channels".into(),
            });
        }
        let scale = T::from_f64_lossy(255.0);
        let mut out = vec![T::zero(); 3 * h * w];
        for c in 0..3 {
            for p in 0..h * w {
                out[p * 3 + c] = grad.data()[c * h * w + p] * scale;
            }
        }
        Tensor::new(vec![h, w, 3], out)
    }

    fn pool(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(match self.pool {
            PoolMode::Max => tensor::maxpool2(x)?.output,
            PoolMode::Average => tensor::avgpool2(x)?.output,
        })
    }

    fn pool_grad(&self, x: &Tensor<T>, up: &Tensor<T>) -> Result<Tensor<T>> {
        match self.pool {
            PoolMode::Max => tensor::maxpool2_grad(x, up),
            PoolMode::Average => tensor::avgpool2_grad(x, up),
        }
    }

    fn deepest(layers: &[&str]) -> Result<Option<usize>> {
        let mut deepest = None;
        for l in layers {
            let i = layer_index(l)?;
            deepest = Some(deepest.map_or(i, |d: usize| d.max(i)));
        }
        Ok(deepest)
    }

    /// Runs the trunk on a preprocessed `3 x H x W` input, stopping after the
    /// deepest requested layer.
    pub fn forward(&self, input: &Tensor<T>, capture_layers: &[&str]) -> Result<FeatureCapture<T>> {
        Ok(self.run(input, capture_layers, false)?.0)
    }

    pub fn forward_traced(
        &self,
        input: &Tensor<T>,
        capture_layers: &[&str],
    ) -> Result<(FeatureCapture<T>, ForwardTrace<T>)> {
        self.run(input, capture_layers, true)
    }

    fn run(
        &self,
        input: &Tensor<T>,
        capture_layers: &[&str],
        keep: bool,
    ) -> Result<(FeatureCapture<T>, ForwardTrace<T>)> {
        let (c, _, _) = input.dims3()?;
        if c != 3 {
            return Err(Error::InvalidShape {
                shape: input.shape().to_vec(),
                reason: "network input must have 3 channels".into(),
            });
        }
        let mut trace = ForwardTrace {
            input_shape: input.shape().to_vec(),
            conv_inputs: Vec::new(),
            pre_activations: Vec::new(),
            pool_inputs: Vec::new(),
        };
        let mut captures = BTreeMap::new();
        let Some(deepest) = Self::deepest(capture_layers)? else {
            return Ok((FeatureCapture::new(captures), trace));
        };
        let arch = architecture();
        let mut x = input.clone();
        for (i, info) in arch.iter().enumerate().take(deepest + 1) {
            if info.after_pool {
                let pooled = self.pool(&x)?;
                if keep {
                    trace.pool_inputs.push(Some(std::mem::replace(&mut x, pooled)));
                } else {
                    x = pooled;
                }
            } else if keep {
                trace.pool_inputs.push(None);
            }
            let pre = tensor::conv2d(&x, &self.convs[i])?;
            let post = tensor::relu(&pre);
            if capture_layers.contains(&info.name) {
                captures.insert(info.name.to_string(), post.clone());
            }
            if keep {
                trace.conv_inputs.push(std::mem::replace(&mut x, post));
                trace.pre_activations.push(pre);
            } else {
                x = post;
            }
        }
        Ok((FeatureCapture::new(captures), trace))
    }

    /// Gradient w.r.t. the preprocessed input of `sum_l <layer_grads[l], F_l>`.
    pub fn backward(
        &self,
        input: &Tensor<T>,
        layer_grads: &BTreeMap<String, Tensor<T>>,
    ) -> Result<Tensor<T>> {
        let names: Vec<&str> = layer_grads.keys().map(String::as_str).collect();
        let (_, trace) = self.forward_traced(input, &names)?;
        self.backward_traced(&trace, layer_grads)
    }

    pub fn backward_traced(
        &self,
        trace: &ForwardTrace<T>,
        layer_grads: &BTreeMap<String, Tensor<T>>,
    ) -> Result<Tensor<T>> {
        let traced = trace.pre_activations.len();
        for name in layer_grads.keys() {
            if layer_index(name)? >= traced {
                return Err(Error::UnknownLayer(name.clone()));
            }
        }
        let mut g: Option<Tensor<T>> = None;
        for i in (0..traced).rev() {
            let pre = &trace.pre_activations[i];
            if let Some(lg) = layer_grads.get(CONV_LAYERS[i]) {
                if lg.shape() != pre.shape() {
                    return Err(Error::ShapeMismatch {
                        context: "layer gradient",
                        left: pre.shape().to_vec(),
                        right: lg.shape().to_vec(),
                    });
                }
                match g.as_mut() {
                    Some(acc) => acc.add_scaled(lg, T::one())?,
                    None => g = Some(lg.clone()),
                }
            }
            let Some(up) = g.take() else { continue };
            let up = tensor::relu_grad(pre, &up)?;
            let mut down = tensor::conv2d_grad(&trace.conv_inputs[i], &self.convs[i], &up)?;
            if let Some(pool_in) = &trace.pool_inputs[i] {
                down = self.pool_grad(pool_in, &down)?;
            }
            g = Some(down);
        }
        Ok(g.unwrap_or_else(|| Tensor::zeros(&trace.input_shape)))
    }
}

/// `(H, W)` of an `H x W x 3` image.
pub fn image_dims<T: Scalar>(image: &Tensor<T>) -> Result<(usize, usize)> {
    match image.shape() {
        &[h, w, 3] => Ok((h, w)),
        s => Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: "expected an H x W x 3 image".into(),
        }),
    }
}
