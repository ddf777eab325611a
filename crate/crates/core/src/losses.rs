//! Content, augmented style, photorealism and assessment losses, and the
//! weighted objective with its gradient w.r.t. the transfer image.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::matting::{affine_loss_with_grad, SparseSymmetricMatrix};
use crate::scalar::Scalar;
use crate::segmentation::{build_mask_pyramid, MaskPyramid};
use crate::semantics::ClassSet;
use crate::tensor::Tensor;
use crate::vgg::{image_dims, FeatureCapture, VggModel, DEFAULT_CONTENT_LAYERS, DEFAULT_STYLE_LAYERS};

/// Per-layer weights keyed by layer name.
pub type LayerWeights = BTreeMap<String, f64>;

fn feature_dims<T: Scalar>(f: &Tensor<T>) -> Result<(usize, usize)> {
    match f.shape() {
        [] => Err(Error::EmptyTensor),
        [n, rest @ ..] => Ok((*n, rest.iter().product())),
    }
}

/// `F Fᵀ` for an `N x D` feature matrix (any trailing dims are flattened).
pub fn gram<T: Scalar>(f: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d) = feature_dims(f)?;
    let mut g = vec![T::zero(); n * n];
    T::gemm(n, d, n, T::one(), f.data(), (d, 1), f.data(), (1, d), T::zero(), &mut g, (n, 1));
    Tensor::new(vec![n, n], g)
}

fn scale_columns<T: Scalar>(f: &Tensor<T>, mask: &[T]) -> Result<Tensor<T>> {
    let (n, d) = feature_dims(f)?;
    if mask.len() != d {
        return Err(Error::ShapeMismatch {
            context: "mask length vs feature map size",
            left: vec![n, d],
            right: vec![mask.len()],
        });
    }
    let mut out = f.clone();
    for row in out.data_mut().chunks_exact_mut(d) {
        for (v, &m) in row.iter_mut().zip(mask) {
            *v *= m;
        }
    }
    Ok(out)
}

/// Gram matrix of `F` with column `j` scaled by `mask[j]`.
pub fn masked_gram<T: Scalar>(f: &Tensor<T>, mask: &[T]) -> Result<Tensor<T>> {
    gram(&scale_columns(f, mask)?)
}

/// A weighted loss term: its value, the unweighted per-layer values, and the
/// gradient of the weighted value w.r.t. each layer's features.
#[derive(Debug, Clone)]
pub struct TermEval<T> {
    pub value: f64,
    pub per_layer: BTreeMap<String, f64>,
    pub grads: BTreeMap<String, Tensor<T>>,
}

impl<T> Default for TermEval<T> {
    fn default() -> Self {
        Self {
            value: 0.0,
            per_layer: BTreeMap::new(),
            grads: BTreeMap::new(),
        }
    }
}

fn active(weights: &LayerWeights) -> impl Iterator<Item = (&str, f64)> {
    weights.iter().filter(|(_, &w)| w > 0.0).map(|(k, &w)| (k.as_str(), w))
}

/// `Σ α_ℓ (1/(2 N D)) Σ (F[O] - F[I])²` over the layers with positive weight.
pub fn content_loss<T: Scalar>(
    out: &FeatureCapture<T>,
    target: &FeatureCapture<T>,
    alpha: &LayerWeights,
) -> Result<TermEval<T>> {
    let mut eval = TermEval::default();
    for (layer, a) in active(alpha) {
        let (fo, ft) = (out.get(layer)?, target.get(layer)?);
        fo.expect_same_shape(ft, "content features")?;
        let (n, d) = feature_dims(fo)?;
        let norm = 1.0 / (2.0 * n as f64 * d as f64);
        let diff: Vec<T> = fo.data().iter().zip(ft.data()).map(|(&o, &t)| o - t).collect();
        let l = norm * diff.iter().map(|v| v.as_f64().powi(2)).sum::<f64>();
        let g = T::from_f64_lossy(2.0 * a * norm);
        eval.value += a * l;
        eval.per_layer.insert(layer.to_string(), l);
        eval.grads
            .insert(layer.to_string(), Tensor::new(fo.shape().to_vec(), diff.into_iter().map(|v| v * g).collect())?);
    }
    Ok(eval)
}

/// `(1/(2N²)) Σ (G[O] - G[S])²` for one layer, with its feature gradient.
pub fn style_loss<T: Scalar>(fo: &Tensor<T>, fs: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    let (n, d) = feature_dims(fo)?;
    let (ns, _) = feature_dims(fs)?;
    if n != ns {
        return Err(Error::ShapeMismatch {
            context: "style features",
            left: fo.shape().to_vec(),
            right: fs.shape().to_vec(),
        });
    }
    let ones = vec![T::one(); d];
    class_style_term(fo, &ones, &gram(fs)?)
}

/// One class of one layer: loss and gradient of
/// `(1/(2N²)) Σ (G_c[O] - target)²`, `G_c[O]` being the masked Gram.
fn class_style_term<T: Scalar>(fo: &Tensor<T>, mask: &[T], target: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    let (n, d) = feature_dims(fo)?;
    let fm = scale_columns(fo, mask)?;
    let mut e = gram(&fm)?;
    e.add_scaled(target, -T::one())?;
    let norm = 1.0 / (2.0 * (n * n) as f64);
    let value = norm * e.data().iter().map(|v| v.as_f64().powi(2)).sum::<f64>();
    // d/dF = (2/N²) · (E · F∘m) ∘ m
    let mut grad = vec![T::zero(); n * d];
    let scale = T::from_f64_lossy(2.0 / (n * n) as f64);
    T::gemm(n, n, d, scale, e.data(), (n, 1), fm.data(), (d, 1), T::zero(), &mut grad, (d, 1));
    for row in grad.chunks_exact_mut(d) {
        for (v, &m) in row.iter_mut().zip(mask) {
            *v *= m;
        }
    }
    Ok((value, Tensor::new(fo.shape().to_vec(), grad)?))
}

fn check_mask_grid<T: Scalar>(features: &Tensor<T>, masks: &Tensor<T>) -> Result<()> {
    let (_, fh, fw) = features.dims3()?;
    let (_, mh, mw) = masks.dims3()?;
    if (fh, fw) != (mh, mw) {
        return Err(Error::MaskResolution {
            expected: (fh, fw),
            actual: (mh, mw),
        });
    }
    Ok(())
}

/// Per-class style Gram matrices of the style image, computed once.
#[derive(Debug, Clone)]
pub struct StyleTargets<T> {
    classes: Vec<ClassSet>,
    grams: BTreeMap<String, Vec<Tensor<T>>>,
}

impl<T: Scalar> StyleTargets<T> {
    pub fn new(style: &FeatureCapture<T>, pyramid: &MaskPyramid<T>, layers: &[&str]) -> Result<Self> {
        let mut grams = BTreeMap::new();
        for &layer in layers {
            let f = style.get(layer)?;
            check_mask_grid(f, pyramid.level(layer)?)?;
            let per_class = (0..pyramid.num_classes())
                .map(|c| masked_gram(f, pyramid.mask(c, layer)?))
                .collect::<Result<Vec<_>>>()?;
            grams.insert(layer.to_string(), per_class);
        }
        Ok(Self {
            classes: pyramid.classes().to_vec(),
            grams,
        })
    }

    pub fn classes(&self) -> &[ClassSet] {
        &self.classes
    }

    /// `Γ Σ β_ℓ Σ_c (1/(2N²)) Σ (G_c[O] - G_c[S])²`, output masks taken from
    /// `pyramid` (the content image's segmentation).
    pub fn loss(
        &self,
        out: &FeatureCapture<T>,
        pyramid: &MaskPyramid<T>,
        beta: &LayerWeights,
        gamma: f64,
    ) -> Result<TermEval<T>> {
        if pyramid.classes() != self.classes.as_slice() {
            return Err(Error::ClassTableMismatch);
        }
        let mut eval = TermEval::default();
        if gamma <= 0.0 {
            return Ok(eval);
        }
        for (layer, b) in active(beta) {
            let targets = self
                .grams
                .get(layer)
                .ok_or_else(|| Error::UnknownLayer(layer.to_string()))?;
            let fo = out.get(layer)?;
            check_mask_grid(fo, pyramid.level(layer)?)?;
            let mut layer_loss = 0.0;
            let mut layer_grad = Tensor::zeros(fo.shape());
            for (c, target) in targets.iter().enumerate() {
                let (l, g) = class_style_term(fo, pyramid.mask(c, layer)?, target)?;
                layer_loss += l;
                layer_grad.add_scaled(&g, T::one())?;
            }
            let w = gamma * b;
            eval.value += w * layer_loss;
            eval.per_layer.insert(layer.to_string(), layer_loss);
            eval.grads.insert(layer.to_string(), layer_grad.scale(T::from_f64_lossy(w)));
        }
        Ok(eval)
    }
}

/// Augmented style loss between the transfer image's and the style image's
/// features. Output-side masks come from the content segmentation.
pub fn augmented_style_loss<T: Scalar>(
    out: &FeatureCapture<T>,
    style: &FeatureCapture<T>,
    content_pyramid: &MaskPyramid<T>,
    style_pyramid: &MaskPyramid<T>,
    beta: &LayerWeights,
    gamma: f64,
) -> Result<TermEval<T>> {
    if content_pyramid.classes() != style_pyramid.classes() {
        return Err(Error::ClassTableMismatch);
    }
    let layers: Vec<&str> = active(beta).map(|(l, _)| l).collect();
    StyleTargets::new(style, style_pyramid, &layers)?.loss(out, content_pyramid, beta, gamma)
}

/// Predicted rating histogram over scores 1..=10 and the gradient of its
/// mean w.r.t. the image.
#[derive(Debug, Clone)]
pub struct Assessment<T> {
    pub histogram: [f64; 10],
    pub mean: f64,
    pub grad: Tensor<T>,
}

/// Aesthetic rating model.
pub trait AssessmentScorer<T: Scalar>: Send + Sync {
    fn score(&self, image: &Tensor<T>) -> Result<Assessment<T>>;
}

fn histogram_mean(h: &[f64; 10]) -> f64 {
    h.iter().enumerate().map(|(k, p)| (k + 1) as f64 * p).sum()
}

/// Returns the same histogram for every image.
#[derive(Debug, Clone)]
pub struct ConstantScorer {
    histogram: [f64; 10],
}

impl ConstantScorer {
    /// `weights` are normalized to sum to one.
    pub fn new(weights: [f64; 10]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) || total <= 0.0 {
            return Err(Error::Scorer("histogram weights must be non-negative with positive sum".into()));
        }
        Ok(Self {
            histogram: weights.map(|w| w / total),
        })
    }
}

impl<T: Scalar> AssessmentScorer<T> for ConstantScorer {
    fn score(&self, image: &Tensor<T>) -> Result<Assessment<T>> {
        Ok(Assessment {
            histogram: self.histogram,
            mean: histogram_mean(&self.histogram),
            grad: Tensor::zeros(image.shape()),
        })
    }
}

/// Stand-in rating model driven by global luminance contrast.
///
/// The histogram is a softmax over ratings `k = 1..=10` with logits
/// `s·k`, where `s = slope · (σ_Y - pivot)` and `σ_Y` is the standard
/// deviation of luminance. At `σ_Y = pivot` the histogram is uniform
/// (mean 5.5); higher contrast pushes the mean towards 10.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastScorer {
    pub slope: f64,
    pub pivot: f64,
}

impl Default for ContrastScorer {
    fn default() -> Self {
        Self {
            slope: 20.0,
            pivot: 0.2,
        }
    }
}

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

impl<T: Scalar> AssessmentScorer<T> for ContrastScorer {
    fn score(&self, image: &Tensor<T>) -> Result<Assessment<T>> {
        let (h, w) = image_dims(image)?;
        let n = (h * w) as f64;
        let luma: Vec<f64> = image
            .data()
            .chunks_exact(3)
            .map(|p| (0..3).map(|c| LUMA[c] * p[c].as_f64()).sum())
            .collect();
        let mean_y = luma.iter().sum::<f64>() / n;
        let var_y = luma.iter().map(|y| (y - mean_y).powi(2)).sum::<f64>() / n;
        // keeps the derivative finite on flat images
        let sigma = (var_y + 1e-12).sqrt();
        let s = self.slope * (sigma - self.pivot);

        let logits: [f64; 10] = std::array::from_fn(|k| s * (k + 1) as f64);
        let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps = logits.map(|z| (z - top).exp());
        let z: f64 = exps.iter().sum();
        let histogram = exps.map(|e| e / z);
        let mean = histogram_mean(&histogram);
        if !mean.is_finite() {
            return Err(Error::Scorer("rating is not finite".into()));
        }
        let spread: f64 = histogram
            .iter()
            .enumerate()
            .map(|(k, p)| ((k + 1) as f64 - mean).powi(2) * p)
            .sum();
        // d mean / d Y_p = Var(k) · slope · (Y_p - Ȳ) / (n σ)
        let coeff = spread * self.slope / (n * sigma);
        let mut grad = Vec::with_capacity(image.len());
        for y in &luma {
            let g = coeff * (y - mean_y);
            grad.extend(LUMA.iter().map(|&c| T::from_f64_lossy(g * c)));
        }
        Ok(Assessment {
            histogram,
            mean,
            grad: Tensor::new(image.shape().to_vec(), grad)?,
        })
    }
}

/// `10 - mean rating` and its gradient.
pub fn assessment_loss<T: Scalar>(scorer: &dyn AssessmentScorer<T>, image: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    let a = scorer.score(image)?;
    if !(1.0..=10.0).contains(&a.mean) {
        return Err(Error::Scorer(format!("mean rating {} outside [1, 10]", a.mean)));
    }
    image.expect_same_shape(&a.grad, "scorer gradient")?;
    Ok((10.0 - a.mean, a.grad.scale(-T::one())))
}

/// Weights of the combined objective.
#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// α_ℓ per content layer.
    pub content_weights: LayerWeights,
    /// β_ℓ per style layer.
    pub style_weights: LayerWeights,
    /// Γ, global factor on the style term.
    pub style_scale: f64,
    /// λ, on the matting-Laplacian term.
    pub photorealism_weight: f64,
    /// ϑ, on the assessment term.
    pub assessment_weight: f64,
    /// Semantic grouping threshold used to build the masks; carried so runs
    /// can be reproduced from their configuration.
    pub theta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::from_scalars(1.0, 100.0, 1e4, 1e5, 0.6)
    }
}

impl LossConfig {
    /// `alpha` on every default content layer, `beta` split evenly over the
    /// default style layers, `Γ = 1`.
    pub fn from_scalars(alpha: f64, beta: f64, lambda: f64, vartheta: f64, theta: f64) -> Self {
        let per_style = beta / DEFAULT_STYLE_LAYERS.len() as f64;
        Self {
            content_weights: DEFAULT_CONTENT_LAYERS.iter().map(|l| (l.to_string(), alpha)).collect(),
            style_weights: DEFAULT_STYLE_LAYERS.iter().map(|l| (l.to_string(), per_style)).collect(),
            style_scale: 1.0,
            photorealism_weight: lambda,
            assessment_weight: vartheta,
            theta,
        }
    }

    /// Full check for a job: weights valid and some feature term active.
    pub fn validate(&self) -> Result<()> {
        self.validate_weights()?;
        let any_content = self.content_weights.values().any(|&w| w > 0.0);
        let any_style = self.style_scale > 0.0 && self.style_weights.values().any(|&w| w > 0.0);
        if !any_content && !any_style {
            return Err(Error::NoFeatureWeights);
        }
        Ok(())
    }

    /// Every weight finite and non-negative, layers known, θ in `[0, 1]`.
    /// An all-zero objective passes.
    pub fn validate_weights(&self) -> Result<()> {
        let check = |name: String, value: f64| {
            if value.is_finite() && value >= 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidWeight { name, value })
            }
        };
        for (l, &w) in &self.content_weights {
            crate::vgg::layer_index(l)?;
            check(format!("content/{l}"), w)?;
        }
        for (l, &w) in &self.style_weights {
            crate::vgg::layer_index(l)?;
            check(format!("style/{l}"), w)?;
        }
        check("style scale".into(), self.style_scale)?;
        check("photorealism".into(), self.photorealism_weight)?;
        check("assessment".into(), self.assessment_weight)?;
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::InvalidThreshold(self.theta));
        }
        Ok(())
    }

    fn active_content(&self) -> LayerWeights {
        self.content_weights.iter().filter(|(_, &w)| w > 0.0).map(|(k, &w)| (k.clone(), w)).collect()
    }

    fn active_style(&self) -> LayerWeights {
        if self.style_scale <= 0.0 {
            return LayerWeights::new();
        }
        self.style_weights.iter().filter(|(_, &w)| w > 0.0).map(|(k, &w)| (k.clone(), w)).collect()
    }
}

/// Loss values of one evaluation. `content`, `style`, `photorealism` and
/// `assessment` are the weighted contributions, so they add up to `total`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossReport {
    pub content: f64,
    pub style: f64,
    pub photorealism: f64,
    pub assessment: f64,
    pub total: f64,
    /// Unweighted content loss per layer.
    pub content_layers: BTreeMap<String, f64>,
    /// Unweighted augmented style loss per layer.
    pub style_layers: BTreeMap<String, f64>,
    /// Unweighted affine loss.
    pub affine: f64,
    /// Unweighted assessment loss, `10 - rating`.
    pub rating_gap: f64,
}

impl LossReport {
    fn finish(mut self) -> Self {
        self.total = self.content + self.style + self.photorealism + self.assessment;
        self
    }

    pub const CSV_HEADER: &'static str = "iteration,content,style,photorealism,assessment,total";

    pub fn csv_row(&self, iteration: usize) -> String {
        format!(
            "{iteration},{},{},{},{},{}",
            self.content, self.style, self.photorealism, self.assessment, self.total
        )
    }
}

/// Image-space gradients of the four weighted terms.
#[derive(Debug, Clone)]
pub struct TermGradients<T> {
    pub content: Tensor<T>,
    pub style: Tensor<T>,
    pub photorealism: Tensor<T>,
    pub assessment: Tensor<T>,
}

impl<T: Scalar> TermGradients<T> {
    pub fn total(&self) -> Result<Tensor<T>> {
        let mut g = self.content.clone();
        g.add_scaled(&self.style, T::one())?;
        g.add_scaled(&self.photorealism, T::one())?;
        g.add_scaled(&self.assessment, T::one())?;
        Ok(g)
    }
}

/// Everything the objective needs besides the transfer image, computed once
/// per job.
pub struct Objective<'a, T: Scalar> {
    model: &'a VggModel<T>,
    config: LossConfig,
    content_weights: LayerWeights,
    style_weights: LayerWeights,
    layers: Vec<String>,
    shape: Vec<usize>,
    content_features: FeatureCapture<T>,
    content_pyramid: MaskPyramid<T>,
    style_targets: StyleTargets<T>,
    laplacian: Option<SparseSymmetricMatrix>,
    scorer: Option<Box<dyn AssessmentScorer<T> + 'a>>,
}

impl<'a, T: Scalar> Objective<'a, T> {
    /// Captures content features and style Gram targets.
    ///
    /// `content_masks` and `style_masks` are `classes x H x W` stacks at the
    /// resolution of their images, both over the shared `classes` table.
    pub fn new(
        model: &'a VggModel<T>,
        config: LossConfig,
        content: &Tensor<T>,
        style: &Tensor<T>,
        content_masks: &Tensor<T>,
        style_masks: &Tensor<T>,
        classes: &[ClassSet],
    ) -> Result<Self> {
        config.validate_weights()?;
        let content_weights = config.active_content();
        let style_weights = config.active_style();
        let mut layers: Vec<String> = content_weights.keys().chain(style_weights.keys()).cloned().collect();
        layers.sort();
        layers.dedup();

        for (image, masks) in [(content, content_masks), (style, style_masks)] {
            let dims = image_dims(image)?;
            let (_, mh, mw) = masks.dims3()?;
            if dims != (mh, mw) {
                return Err(Error::MaskResolution {
                    expected: dims,
                    actual: (mh, mw),
                });
            }
        }
        let style_layers: Vec<&str> = style_weights.keys().map(String::as_str).collect();
        let content_pyramid = build_mask_pyramid(content_masks, classes, &style_layers)?;
        let style_pyramid = build_mask_pyramid(style_masks, classes, &style_layers)?;

        let content_layers: Vec<&str> = content_weights.keys().map(String::as_str).collect();
        let content_features = model.forward(&model.preprocess(content)?, &content_layers)?;
        let style_features = model.forward(&model.preprocess(style)?, &style_layers)?;
        let style_targets = StyleTargets::new(&style_features, &style_pyramid, &style_layers)?;

        Ok(Self {
            model,
            config,
            content_weights,
            style_weights,
            layers,
            shape: content.shape().to_vec(),
            content_features,
            content_pyramid,
            style_targets,
            laplacian: None,
            scorer: None,
        })
    }

    pub fn with_laplacian(mut self, laplacian: SparseSymmetricMatrix) -> Self {
        self.laplacian = Some(laplacian);
        self
    }

    pub fn with_scorer(mut self, scorer: Box<dyn AssessmentScorer<T> + 'a>) -> Self {
        self.scorer = Some(scorer);
        self
    }

    pub fn config(&self) -> &LossConfig {
        &self.config
    }

    pub fn image_shape(&self) -> &[usize] {
        &self.shape
    }

    fn layer_names(&self) -> Vec<&str> {
        self.layers.iter().map(String::as_str).collect()
    }

    fn feature_terms(&self, out: &FeatureCapture<T>) -> Result<(TermEval<T>, TermEval<T>)> {
        let content = content_loss(out, &self.content_features, &self.content_weights)
            .map_err(|e| e.in_term("content"))?;
        let style = self
            .style_targets
            .loss(out, &self.content_pyramid, &self.style_weights, self.config.style_scale)
            .map_err(|e| e.in_term("style"))?;
        Ok((content, style))
    }

    fn affine_term(&self, image: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
        if self.config.photorealism_weight <= 0.0 {
            return Ok((0.0, Tensor::zeros(image.shape())));
        }
        let l = self
            .laplacian
            .as_ref()
            .ok_or_else(|| Error::Term {
                term: "photorealism",
                source: Box::new(Error::CacheFormat("no matting Laplacian attached".into())),
            })?;
        affine_loss_with_grad(l, image).map_err(|e| e.in_term("photorealism"))
    }

    fn assessment_term(&self, image: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
        if self.config.assessment_weight <= 0.0 {
            return Ok((0.0, Tensor::zeros(image.shape())));
        }
        let scorer = self.scorer.as_deref().ok_or_else(|| Error::Term {
            term: "assessment",
            source: Box::new(Error::Scorer("no scorer attached".into())),
        })?;
        assessment_loss(scorer, image).map_err(|e| e.in_term("assessment"))
    }

    fn check_image(&self, image: &Tensor<T>) -> Result<()> {
        if image.shape() != self.shape.as_slice() {
            return Err(Error::ShapeMismatch {
                context: "transfer image vs content image",
                left: self.shape.clone(),
                right: image.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn report(&self, content: &TermEval<T>, style: &TermEval<T>, affine: f64, gap: f64) -> LossReport {
        LossReport {
            content: content.value,
            style: style.value,
            photorealism: self.config.photorealism_weight * affine,
            assessment: self.config.assessment_weight * gap,
            total: 0.0,
            content_layers: content.per_layer.clone(),
            style_layers: style.per_layer.clone(),
            affine,
            rating_gap: gap,
        }
        .finish()
    }

    /// Loss values only; no backward pass.
    pub fn loss(&self, image: &Tensor<T>) -> Result<LossReport> {
        self.check_image(image)?;
        let out = self.model.forward(&self.model.preprocess(image)?, &self.layer_names())?;
        let (content, style) = self.feature_terms(&out)?;
        let (affine, gap) = (self.affine_term(image)?.0, self.assessment_term(image)?.0);
        Ok(self.report(&content, &style, affine, gap))
    }

    /// Loss values and the gradient of the total w.r.t. the `H x W x 3`
    /// transfer image, with one backward pass through the network.
    pub fn evaluate(&self, image: &Tensor<T>) -> Result<(LossReport, Tensor<T>)> {
        self.check_image(image)?;
        let input = self.model.preprocess(image)?;
        let (out, trace) = self.model.forward_traced(&input, &self.layer_names())?;
        let (content, style) = self.feature_terms(&out)?;

        let mut layer_grads = content.grads.clone();
        for (layer, g) in &style.grads {
            match layer_grads.get_mut(layer) {
                Some(acc) => acc.add_scaled(g, T::one())?,
                None => {
                    layer_grads.insert(layer.clone(), g.clone());
                }
            }
        }
        let mut grad = self
            .model
            .preprocess_grad(&self.model.backward_traced(&trace, &layer_grads)?)?;

        let (affine, affine_grad) = self.affine_term(image)?;
        let (gap, gap_grad) = self.assessment_term(image)?;
        grad.add_scaled(&affine_grad, T::from_f64_lossy(self.config.photorealism_weight))?;
        grad.add_scaled(&gap_grad, T::from_f64_lossy(self.config.assessment_weight))?;
        Ok((self.report(&content, &style, affine, gap), grad))
    }

    /// Like [`Self::evaluate`] but back-propagates each term separately.
    pub fn evaluate_terms(&self, image: &Tensor<T>) -> Result<(LossReport, TermGradients<T>)> {
        self.check_image(image)?;
        let input = self.model.preprocess(image)?;
        let (out, trace) = self.model.forward_traced(&input, &self.layer_names())?;
        let (content, style) = self.feature_terms(&out)?;
        let back = |grads: &BTreeMap<String, Tensor<T>>| -> Result<Tensor<T>> {
            self.model.preprocess_grad(&self.model.backward_traced(&trace, grads)?)
        };
        let (affine, affine_grad) = self.affine_term(image)?;
        let (gap, gap_grad) = self.assessment_term(image)?;
        let grads = TermGradients {
            content: back(&content.grads)?,
            style: back(&style.grads)?,
            photorealism: affine_grad.scale(T::from_f64_lossy(self.config.photorealism_weight)),
            assessment: gap_grad.scale(T::from_f64_lossy(self.config.assessment_weight)),
        };
        Ok((self.report(&content, &style, affine, gap), grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn capture(layer: &str, f: Tensor<f64>) -> FeatureCapture<f64> {
        FeatureCapture::new(BTreeMap::from([(layer.to_string(), f)]))
    }

    fn weights(layer: &str, w: f64) -> LayerWeights {
        LayerWeights::from([(layer.to_string(), w)])
    }

    #[test]
    fn gram_examples() {
        assert_eq!(gram(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap().data(), &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(gram(&t(&[2, 2], &[1.0; 4])).unwrap().data(), &[2.0; 4]);
        assert_eq!(gram(&Tensor::<f64>::zeros(&[3, 5])).unwrap().data(), &[0.0; 9]);
    }

    #[test]
    fn masked_gram_examples() {
        let f = t(&[1, 2], &[1.0, 2.0]);
        assert_eq!(masked_gram(&f, &[1.0, 0.0]).unwrap().data(), &[1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random(&[3, 2, 4], &mut rng);
        assert_eq!(masked_gram(&f, &[1.0; 8]).unwrap(), gram(&f).unwrap());
        assert!(masked_gram(&f, &[0.0; 8]).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(masked_gram(&f, &[1.0; 7]).is_err());
    }

    #[test]
    fn content_loss_hand_value() {
        let o = capture("conv4_2", t(&[1, 1, 2], &[1.0, 2.0]));
        let i = capture("conv4_2", t(&[1, 1, 2], &[0.0, 0.0]));
        let eval = content_loss(&o, &i, &weights("conv4_2", 1.0)).unwrap();
        assert_eq!(eval.value, 1.25);
        assert_eq!(content_loss(&o, &o, &weights("conv4_2", 1.0)).unwrap().value, 0.0);
    }

    #[test]
    fn content_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let target = capture("conv1_1", random(&[4, 2, 2], &mut rng));
        let fo = random(&[4, 2, 2], &mut rng);
        let w = weights("conv1_1", 0.7);
        let g = content_loss(&capture("conv1_1", fo.clone()), &target, &w).unwrap().grads["conv1_1"].clone();
        let fd = central_difference(&fo, 1e-6, |x| {
            Ok(content_loss(&capture("conv1_1", x.clone()), &target, &w)?.value)
        })
        .unwrap();
        assert!(relative_error(&g, &fd) < 1e-6);
    }

    fn pyramid(masks: Tensor<f64>, classes: &[ClassSet]) -> MaskPyramid<f64> {
        build_mask_pyramid(&masks, classes, &["conv1_1"]).unwrap()
    }

    #[test]
    fn single_class_matches_plain_style_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fo = random(&[5, 3, 4], &mut rng);
        let fs = random(&[5, 3, 4], &mut rng);
        let classes = [ClassSet::word("sky")];
        let p = pyramid(Tensor::full(&[1, 3, 4], 1.0), &classes);
        let aug = augmented_style_loss(
            &capture("conv1_1", fo.clone()),
            &capture("conv1_1", fs.clone()),
            &p,
            &p,
            &weights("conv1_1", 1.0),
            1.0,
        )
        .unwrap();
        let (plain, plain_grad) = style_loss(&fo, &fs).unwrap();
        assert!((aug.value - plain).abs() <= 1e-12 * plain);
        assert!(relative_error(&aug.grads["conv1_1"], &plain_grad) < 1e-12);
    }

    #[test]
    fn two_class_style_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let classes = [ClassSet::word("sea"), ClassSet::word("sky")];
        let split = |rng: &mut ChaCha8Rng| {
            let top: Vec<f64> = (0..16).map(|_| rng.random_range(0.0..1.0)).collect();
            let mut data = top.clone();
            data.extend(top.iter().map(|v| 1.0 - v));
            Tensor::new(vec![2, 4, 4], data).unwrap()
        };
        let pi = pyramid(split(&mut rng), &classes);
        let ps = pyramid(split(&mut rng), &classes);
        let style = capture("conv1_1", random(&[3, 4, 4], &mut rng));
        let fo = random(&[3, 4, 4], &mut rng);
        let w = weights("conv1_1", 2.0);
        let eval = augmented_style_loss(&capture("conv1_1", fo.clone()), &style, &pi, &ps, &w, 0.5).unwrap();
        let fd = central_difference(&fo, 1e-5, |x| {
            Ok(augmented_style_loss(&capture("conv1_1", x.clone()), &style, &pi, &ps, &w, 0.5)?.value)
        })
        .unwrap();
        assert!(relative_error(&eval.grads["conv1_1"], &fd) < 1e-6);
        let zero = augmented_style_loss(&style, &style, &ps, &ps, &w, 0.5).unwrap();
        assert!(zero.value.abs() < 1e-12);
    }

    #[test]
    fn mismatched_class_tables_are_rejected() {
        let a = pyramid(Tensor::full(&[1, 2, 2], 1.0), &[ClassSet::word("sky")]);
        let b = pyramid(Tensor::full(&[1, 2, 2], 1.0), &[ClassSet::word("sea")]);
        let f = capture("conv1_1", Tensor::full(&[2, 2, 2], 1.0));
        let err = augmented_style_loss(&f, &f, &a, &b, &weights("conv1_1", 1.0), 1.0).unwrap_err();
        assert!(matches!(err, Error::ClassTableMismatch));
    }

    #[test]
    fn constant_scorers() {
        let img = Tensor::<f64>::full(&[3, 3, 3], 0.5);
        let best = ConstantScorer::new([0., 0., 0., 0., 0., 0., 0., 0., 0., 1.]).unwrap();
        assert_eq!(assessment_loss(&best, &img).unwrap().0, 0.0);
        let worst = ConstantScorer::new([1., 0., 0., 0., 0., 0., 0., 0., 0., 0.]).unwrap();
        assert_eq!(assessment_loss(&worst, &img).unwrap().0, 9.0);
        let uniform = ConstantScorer::new([1.0; 10]).unwrap();
        assert!((assessment_loss(&uniform, &img).unwrap().0 - 4.5).abs() < 1e-12);
    }

    #[test]
    fn contrast_scorer_is_uniform_at_pivot_and_differentiable() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = Tensor::from_fn(&[4, 5, 3], |_| rng.random_range(0.0..1.0));
        let scorer = ContrastScorer::default();
        let (loss, grad) = assessment_loss(&scorer, &img).unwrap();
        assert!((0.0..=9.0).contains(&loss));
        let fd = central_difference(&img, 1e-6, |x| Ok(assessment_loss(&scorer, x)?.0)).unwrap();
        assert!(relative_error(&grad, &fd) < 1e-6);

        let flat = Tensor::<f64>::full(&[4, 4, 3], 0.3);
        let at_pivot = ContrastScorer {
            slope: 20.0,
            pivot: 0.0,
        };
        let a = AssessmentScorer::<f64>::score(&at_pivot, &flat).unwrap();
        assert!((a.mean - 5.5).abs() < 1e-3);
        assert!(a.grad.data().iter().all(|&g| g.abs() < 1e-6));
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = LossConfig::default();
        assert_eq!(c.content_weights, weights("conv4_2", 1.0));
        assert_eq!(c.style_weights.len(), 5);
        assert!(c.style_weights.values().all(|&w| w == 20.0));
        assert_eq!((c.style_scale, c.photorealism_weight, c.assessment_weight), (1.0, 1e4, 1e5));
        assert!(c.validate().is_ok());
        assert!(matches!(
            LossConfig::from_scalars(0.0, 0.0, 1.0, 1.0, 0.5).validate(),
            Err(Error::NoFeatureWeights)
        ));
        assert!(LossConfig::from_scalars(-1.0, 1.0, 1.0, 1.0, 0.5).validate().is_err());
        assert!(LossConfig::from_scalars(1.0, 1.0, f64::NAN, 1.0, 0.5).validate().is_err());
        assert!(LossConfig::from_scalars(1.0, 1.0, 1.0, 1.0, 1.5).validate().is_err());
    }
}
