//! Adam optimization of the transfer image.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::{LossReport, Objective};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vgg::image_dims;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            lr: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates of a bias-corrected Adam run.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub params: AdamParams,
    t: usize,
    m: Vec<f64>,
    v: Vec<f64>,
    shape: Vec<usize>,
    _scalar: std::marker::PhantomData<T>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(shape: &[usize], params: AdamParams) -> Self {
        let n = shape.iter().product();
        Self {
            params,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
            shape: shape.to_vec(),
            _scalar: std::marker::PhantomData,
        }
    }

    /// Steps taken so far.
    pub fn steps(&self) -> usize {
        self.t
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    /// One update `x <- x - lr · m̂ / (sqrt(v̂) + eps)`. A non-finite gradient
    /// leaves `x` and the state untouched.
    pub fn step(&mut self, x: &mut Tensor<T>, grad: &Tensor<T>) -> Result<()> {
        if x.shape() != self.shape.as_slice() || grad.shape() != self.shape.as_slice() {
            return Err(Error::ShapeMismatch {
                context: "adam parameters vs gradient",
                left: x.shape().to_vec(),
                right: grad.shape().to_vec(),
            });
        }
        if !grad.is_finite() {
            return Err(Error::NonFiniteGradient(self.t));
        }
        let AdamParams { lr, beta1, beta2, eps } = self.params;
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (i, (p, g)) in x.data_mut().iter_mut().zip(grad.data()).enumerate() {
            let g = g.as_f64();
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            *p = T::from_f64_lossy(p.as_f64() - lr * m_hat / (v_hat.sqrt() + eps));
        }
        Ok(())
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step<T: Scalar>(state: &mut AdamState<T>, x: &mut Tensor<T>, grad: &Tensor<T>) -> Result<()> {
    state.step(x, grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    Content,
    Style,
    Noise,
}

impl std::str::FromStr for InitMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "content" => Ok(Self::Content),
            "style" => Ok(Self::Style),
            "noise" => Ok(Self::Noise),
            other => Err(format!("unknown init mode `{other}` (content, style, noise)")),
        }
    }
}

/// Bilinear resampling of an `H x W x C` image with pixel-centre alignment.
pub fn resize_bilinear<T: Scalar>(image: &Tensor<T>, height: usize, width: usize) -> Result<Tensor<T>> {
    let (h, w, c) = image.dims3()?;
    if height == 0 || width == 0 || h == 0 || w == 0 {
        return Err(Error::EmptyTensor);
    }
    if (h, w) == (height, width) {
        return Ok(image.clone());
    }
    let src = image.data();
    let coord = |i: usize, from: usize, to: usize| {
        let x = ((i as f64 + 0.5) * from as f64 / to as f64 - 0.5).clamp(0.0, (from - 1) as f64);
        let lo = x.floor() as usize;
        (lo, (lo + 1).min(from - 1), x - lo as f64)
    };
    let mut out = Vec::with_capacity(height * width * c);
    for y in 0..height {
        let (y0, y1, fy) = coord(y, h, height);
        for x in 0..width {
            let (x0, x1, fx) = coord(x, w, width);
            for ch in 0..c {
                let at = |yy: usize, xx: usize| src[(yy * w + xx) * c + ch].as_f64();
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push(T::from_f64_lossy(top * (1.0 - fy) + bottom * fy));
            }
        }
    }
    Tensor::new(vec![height, width, c], out)
}

/// Starting point of the optimization, always at the content image's size.
/// Noise is uniform in `[0, 1]` per channel and reproducible from `seed`.
pub fn init_transfer_image<T: Scalar>(
    mode: InitMode,
    content: &Tensor<T>,
    style: &Tensor<T>,
    seed: u64,
) -> Result<Tensor<T>> {
    let (h, w) = image_dims(content)?;
    match mode {
        InitMode::Content => Ok(content.clone()),
        InitMode::Style => resize_bilinear(style, h, w),
        InitMode::Noise => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok(Tensor::from_fn(content.shape(), |_| T::from_f64_lossy(rng.random_range(0.0..1.0))))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunConfig {
    pub iterations: usize,
    pub adam: AdamParams,
    /// Adam updates `pixel_scale · image`; with the default 255 a step of
    /// `lr = 1` moves a pixel by about one 8-bit level.
    pub pixel_scale: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            adam: AdamParams::default(),
            pixel_scale: 255.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput<T> {
    pub image: Tensor<T>,
    /// Row `t` is the loss after `t` updates, for `t = 0..=iterations`.
    pub log: Vec<LossReport>,
}

/// Minimizes `objective` from `init`. After every update pixels are clamped
/// to `[0, 1]`. `observe(t, report, image)` sees every logged state.
pub fn run<T, F>(objective: &Objective<'_, T>, init: &Tensor<T>, config: &RunConfig, mut observe: F) -> Result<RunOutput<T>>
where
    T: Scalar,
    F: FnMut(usize, &LossReport, &Tensor<T>) -> Result<()>,
{
    let scale = T::from_f64_lossy(config.pixel_scale);
    let inv_scale = T::one() / scale;
    let clamp_max = scale;
    let mut image = init.map(|v| v.max(T::zero()).min(T::one()));
    let mut pixels = image.scale(scale);
    let mut adam = AdamState::new(init.shape(), config.adam);
    let mut log = Vec::with_capacity(config.iterations + 1);
    for t in 0..config.iterations {
        let (report, grad) = objective.evaluate(&image)?;
        observe(t, &report, &image)?;
        log.push(report);
        if !grad.is_finite() {
            return Err(Error::NonFiniteGradient(t));
        }
        adam.step(&mut pixels, &grad.scale(inv_scale))?;
        for p in pixels.data_mut() {
            *p = p.max(T::zero()).min(clamp_max);
        }
        image = pixels.scale(inv_scale);
    }
    let last = objective.loss(&image)?;
    observe(config.iterations, &last, &image)?;
    log.push(last);
    Ok(RunOutput { image, log })
}

pub fn write_loss_log(mut w: impl Write, log: &[LossReport]) -> Result<()> {
    writeln!(w, "{}", LossReport::CSV_HEADER)?;
    for (t, r) in log.iter().enumerate() {
        writeln!(w, "{}", r.csv_row(t))?;
    }
    Ok(())
}

pub fn save_loss_log(path: impl AsRef<Path>, log: &[LossReport]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_loss_log(&mut f, log)?;
    f.flush()?;
    Ok(())
}
