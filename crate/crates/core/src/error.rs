use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures while reading a VGG weight file. Each variant is distinct so
/// callers can tell a foreign file from a damaged one.
#[derive(Debug, Error)]
pub enum WeightsError {
    #[error("not a VGG weight file (magic {found:?}, expected \"VGGW\")")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported weight file version {0}")]
    UnsupportedVersion(u32),
    #[error("weight file truncated while reading {what}")]
    Truncated { what: String },
    #[error("layer {layer}: {part} shape {actual:?}, expected {expected:?}")]
    ShapeMismatch {
        layer: String,
        part: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("unexpected layer `{0}` in weight file")]
    UnexpectedLayer(String),
    #[error("layer `{0}` appears twice in weight file")]
    DuplicateLayer(String),
    #[error("weight file is missing layer `{0}`")]
    MissingLayer(String),
    #[error("layer name is not valid UTF-8")]
    BadLayerName,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: {left:?} vs {right:?}")]
    ShapeMismatch {
        context: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("empty tensor")]
    EmptyTensor,
    #[error("unknown layer `{0}`")]
    UnknownLayer(String),
    #[error(transparent)]
    Weights(#[from] WeightsError),

    #[error("palette is empty")]
    EmptyPalette,
    #[error("palette line {line}: {reason}")]
    PaletteSyntax { line: usize, reason: String },
    #[error("color ({}, {}, {}) at pixel ({x}, {y}) is not in the palette", color[0], color[1], color[2])]
    UnknownColor { color: [u8; 3], x: u32, y: u32 },
    #[error("segmentation {0} is not a lossless format")]
    LossySegmentation(PathBuf),
    #[error("mask resolution {actual:?} does not match {expected:?}")]
    MaskResolution {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("empty word")]
    EmptyWord,
    #[error("word `{0}` is not in the taxonomy")]
    UnknownWord(String),
    #[error("taxonomy line {line}: {reason}")]
    TaxonomySyntax { line: usize, reason: String },
    #[error("malformed taxonomy: {0}")]
    TaxonomyStructure(String),
    #[error("class table is empty")]
    EmptyClassTable,
    #[error("semantic threshold {0} is outside [0, 1]")]
    InvalidThreshold(f64),

    #[error("image {height}x{width} is smaller than the {window}x{window} matting window")]
    ImageTooSmall {
        height: usize,
        width: usize,
        window: usize,
    },
    #[error("non-finite pixel value at flat index {0}")]
    NonFinitePixel(usize),
    #[error("laplacian cache: {0}")]
    CacheFormat(String),

    #[error("class tables of content and style masks differ; run semantic grouping first")]
    ClassTableMismatch,
    #[error("loss weight `{name}` must be finite and non-negative, got {value}")]
    InvalidWeight { name: String, value: f64 },
    #[error("at least one content or style weight must be positive")]
    NoFeatureWeights,
    #[error("{term} loss: {source}")]
    Term {
        term: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error("assessment scorer: {0}")]
    Scorer(String),

    #[error("non-finite gradient at iteration {0}")]
    NonFiniteGradient(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn in_term(self, term: &'static str) -> Self {
        Error::Term {
            term,
            source: Box::new(self),
        }
    }
}
