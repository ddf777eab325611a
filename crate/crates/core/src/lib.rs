//! Photorealistic style transfer with semantic segmentation.
//!
//! The transfer image is optimized so that its VGG-19 features keep the
//! content image's structure while its per-class Gram matrices match those
//! of the style image. Segmentation classes of the two images are first
//! reconciled through a hypernym taxonomy, a matting-Laplacian term keeps
//! the result locally affine in color, and an optional aesthetic scorer adds
//! an assessment term.
//!
//! Every numeric component is generic over [`Scalar`] (`f32` or `f64`);
//! aliases such as [`Tensor32`] fix the precision.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod image_io;
pub mod losses;
pub mod matting;
pub mod optim;
pub mod scalar;
pub mod segmentation;
pub mod semantics;
pub mod tensor;
pub mod vgg;

pub use error::{Error, Result, WeightsError};
pub use losses::{
    assessment_loss, augmented_style_loss, content_loss, gram, masked_gram, style_loss, AssessmentScorer,
    ConstantScorer, ContrastScorer, LossConfig, LossReport, Objective, StyleTargets,
};
pub use matting::{affine_loss, affine_loss_grad, build_matting_laplacian, MattingParams, SparseSymmetricMatrix};
pub use optim::{adam_step, init_transfer_image, AdamParams, AdamState, InitMode, RunConfig, RunOutput};
pub use scalar::Scalar;
pub use segmentation::{
    binary_masks, build_mask_pyramid, load_segmentation, MaskPyramid, Palette, SegmentationMap,
};
pub use semantics::{group_semantics, ClassSet, Grouping, Substitutions, Taxonomy};
pub use tensor::Tensor;
pub use vgg::{FeatureCapture, PoolMode, VggModel};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type VggModel32 = VggModel<f32>;
pub type VggModel64 = VggModel<f64>;
pub type FeatureCapture32 = FeatureCapture<f32>;
pub type FeatureCapture64 = FeatureCapture<f64>;
pub type MaskPyramid32 = MaskPyramid<f32>;
pub type MaskPyramid64 = MaskPyramid<f64>;
pub type Objective32<'a> = Objective<'a, f32>;
pub type Objective64<'a> = Objective<'a, f64>;
