//! Color-coded segmentation masks: palette parsing and repair, decoding into
//! per-pixel class labels, and the per-layer soft-mask pyramids used by the
//! augmented style loss.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use image::{ImageFormat, ImageReader, RgbImage};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::semantics::{normalize_word, ClassSet, Substitutions};
use crate::tensor::{avgpool2, Tensor};
use crate::vgg::pool_depth;

pub type Rgb = [u8; 3];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaletteEntry {
    pub color: Rgb,
    pub class: ClassSet,
}

/// Color/class table. After [`Palette::repair`] colors and classes are both
/// unique; colors dropped by the repair stay readable through `aliases`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Palette {
    entries: Vec<PaletteEntry>,
    aliases: BTreeMap<Rgb, Rgb>,
}

impl Palette {
    pub fn new(entries: Vec<PaletteEntry>) -> Self {
        Self {
            entries,
            aliases: BTreeMap::new(),
        }
    }

    /// Parses `R,G,B<TAB>word[;word...]` lines. Words are normalized
    /// (lowercase, spaces to underscores); no repair is applied.
    pub fn parse(text: &str) -> Result<Self> {
        let none = Substitutions::default();
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let syntax = |reason: &str| Error::PaletteSyntax {
                line: i + 1,
                reason: reason.to_string(),
            };
            let (rgb, words) = line.split_once('\t').ok_or_else(|| syntax("missing TAB"))?;
            let channels: Vec<u8> = rgb
                .split(',')
                .map(|v| v.trim().parse::<u8>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| syntax("color must be three integers in 0..=255"))?;
            let [r, g, b] = channels[..] else {
                return Err(syntax("color must have three channels"));
            };
            let words = words
                .split(';')
                .map(|w| normalize_word(w, &none))
                .collect::<Result<Vec<_>>>()
                .map_err(|_| syntax("empty class word"))?;
            entries.push(PaletteEntry {
                color: [r, g, b],
                class: ClassSet::new(words)?,
            });
        }
        Ok(Self::new(entries))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// The 150-class ADE20K scene-parsing palette, as published (unrepaired).
    pub fn ade20k() -> Self {
        Self::parse(crate::data::ADE20K_PALETTE).expect("shipped palette parses")
    }

    pub fn entries(&self) -> &[PaletteEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Merges entries sharing a color (their word sets are united) and then
    /// drops later entries of a class that already has a color. Dropped colors
    /// become aliases of the color that was kept.
    pub fn repair(&self) -> Result<Palette> {
        if self.entries.is_empty() {
            return Err(Error::EmptyPalette);
        }
        let mut by_color: Vec<PaletteEntry> = Vec::new();
        for e in &self.entries {
            match by_color.iter_mut().find(|x| x.color == e.color) {
                Some(x) => x.class = x.class.union(&e.class),
                None => by_color.push(e.clone()),
            }
        }
        let mut aliases = self.aliases.clone();
        let mut entries: Vec<PaletteEntry> = Vec::new();
        for e in by_color {
            match entries.iter().find(|x| x.class == e.class) {
                Some(kept) => {
                    aliases.insert(e.color, kept.color);
                }
                None => entries.push(e),
            }
        }
        // chase alias chains created by earlier repairs
        let resolved: BTreeMap<Rgb, Rgb> = aliases
            .keys()
            .map(|&from| {
                let mut to = aliases[&from];
                while let Some(&next) = aliases.get(&to) {
                    if next == to {
                        break;
                    }
                    to = next;
                }
                (from, to)
            })
            .collect();
        Ok(Palette {
            entries,
            aliases: resolved,
        })
    }

    pub fn is_repaired(&self) -> bool {
        let n = self.entries.len();
        (0..n).all(|i| {
            (i + 1..n).all(|j| {
                self.entries[i].color != self.entries[j].color
                    && self.entries[i].class != self.entries[j].class
            })
        })
    }

    pub fn class_of(&self, color: Rgb) -> Option<&ClassSet> {
        let color = self.aliases.get(&color).copied().unwrap_or(color);
        self.entries.iter().find(|e| e.color == color).map(|e| &e.class)
    }

    pub fn color_of(&self, class: &ClassSet) -> Option<Rgb> {
        self.entries.iter().find(|e| &e.class == class).map(|e| e.color)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let words: Vec<&str> = e.class.words().collect();
            s.push_str(&format!(
                "{},{},{}\t{}\n",
                e.color[0],
                e.color[1],
                e.color[2],
                words.join(";")
            ));
        }
        s
    }
}

/// Per-pixel class labels plus the table of classes present in the image.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationMap {
    width: usize,
    height: usize,
    labels: Vec<usize>,
    classes: Vec<ClassSet>,
}

impl SegmentationMap {
    pub fn new(width: usize, height: usize, labels: Vec<usize>, classes: Vec<ClassSet>) -> Result<Self> {
        if labels.len() != width * height || labels.is_empty() {
            return Err(Error::InvalidShape {
                shape: vec![height, width],
                reason: format!("{} labels given", labels.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes.len()) {
            return Err(Error::InvalidShape {
                shape: vec![height, width],
                reason: format!("label {bad} exceeds class table of {}", classes.len()),
            });
        }
        Ok(Self {
            width,
            height,
            labels,
            classes,
        })
    }

    /// Decodes packed RGB pixels; classes are numbered by first appearance in
    /// row-major order.
    pub fn from_rgb(width: usize, height: usize, rgb: &[u8], palette: &Palette) -> Result<Self> {
        if rgb.len() != width * height * 3 {
            return Err(Error::InvalidShape {
                shape: vec![height, width, 3],
                reason: format!("{} bytes given", rgb.len()),
            });
        }
        let mut classes: Vec<ClassSet> = Vec::new();
        let mut seen: HashMap<Rgb, usize> = HashMap::new();
        let mut labels = Vec::with_capacity(width * height);
        for (i, px) in rgb.chunks_exact(3).enumerate() {
            let color = [px[0], px[1], px[2]];
            let label = match seen.get(&color) {
                Some(&l) => l,
                None => {
                    let class = palette.class_of(color).ok_or(Error::UnknownColor {
                        color,
                        x: (i % width) as u32,
                        y: (i / width) as u32,
                    })?;
                    let l = match classes.iter().position(|c| c == class) {
                        Some(l) => l,
                        None => {
                            classes.push(class.clone());
                            classes.len() - 1
                        }
                    };
                    seen.insert(color, l);
                    l
                }
            };
            labels.push(label);
        }
        Self::new(width, height, labels, classes)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> &[ClassSet] {
        &self.classes
    }

    /// Sends class `i` to `mapping[i]` of the new class table.
    pub fn relabel(&self, mapping: &[usize], classes: Vec<ClassSet>) -> Result<Self> {
        if mapping.len() != self.classes.len() {
            return Err(Error::InvalidShape {
                shape: vec![mapping.len()],
                reason: format!("mapping must cover {} classes", self.classes.len()),
            });
        }
        let labels = self.labels.iter().map(|&l| mapping[l]).collect();
        Self::new(self.width, self.height, labels, classes)
    }

    /// Paints every pixel with the color of its class.
    pub fn render(&self, colors: &[Rgb]) -> Result<RgbImage> {
        if colors.len() < self.classes.len() {
            return Err(Error::InvalidShape {
                shape: vec![colors.len()],
                reason: format!("need {} colors", self.classes.len()),
            });
        }
        let mut img = RgbImage::new(self.width as u32, self.height as u32);
        for (px, &l) in img.pixels_mut().zip(&self.labels) {
            px.0 = colors[l];
        }
        Ok(img)
    }

    /// Renders with each class's palette color.
    pub fn render_with_palette(&self, palette: &Palette) -> Result<RgbImage> {
        let colors = self
            .classes
            .iter()
            .map(|c| {
                palette.color_of(c).ok_or_else(|| {
                    Error::TaxonomyStructure(format!("class {c} has no palette color"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        self.render(&colors)
    }
}

/// Reads a lossless color-indexed mask image and maps its colors to classes.
pub fn load_segmentation(path: impl AsRef<Path>, palette: &Palette) -> Result<SegmentationMap> {
    let path = path.as_ref();
    let reader = ImageReader::open(path)?.with_guessed_format()?;
    if matches!(reader.format(), Some(ImageFormat::Jpeg | ImageFormat::WebP)) {
        return Err(Error::LossySegmentation(path.to_path_buf()));
    }
    let img = reader.decode()?.to_rgb8();
    let (w, h) = img.dimensions();
    SegmentationMap::from_rgb(w as usize, h as usize, img.as_raw(), palette)
}

/// One-hot masks stacked as a `classes x H x W` tensor.
pub fn binary_masks<T: Scalar>(map: &SegmentationMap) -> Tensor<T> {
    let (c, hw) = (map.classes.len(), map.width * map.height);
    let mut data = vec![T::zero(); c * hw];
    for (p, &l) in map.labels.iter().enumerate() {
        data[l * hw + p] = T::one();
    }
    Tensor::new(vec![c, map.height, map.width], data).expect("labels are validated")
}

/// Soft class masks resampled onto the spatial grid of each captured layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPyramid<T> {
    classes: Vec<ClassSet>,
    levels: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> MaskPyramid<T> {
    pub fn classes(&self) -> &[ClassSet] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// All class masks at `layer`, as `classes x h x w`.
    pub fn level(&self, layer: &str) -> Result<&Tensor<T>> {
        self.levels
            .get(layer)
            .ok_or_else(|| Error::UnknownLayer(layer.to_string()))
    }

    /// Mask of class `class` at `layer`, flattened row-major.
    pub fn mask(&self, class: usize, layer: &str) -> Result<&[T]> {
        let level = self.level(layer)?;
        let (_, h, w) = level.dims3()?;
        Ok(&level.data()[class * h * w..(class + 1) * h * w])
    }

    pub fn layers(&self) -> impl Iterator<Item = &str> {
        self.levels.keys().map(String::as_str)
    }
}

/// Downsamples `masks` (`classes x H x W`) by repeated 2x2 averaging to the
/// grid of every layer in `layers`. Odd extents replicate the last row or
/// column, matching the feature extractor's pooling.
pub fn build_mask_pyramid<T: Scalar>(
    masks: &Tensor<T>,
    classes: &[ClassSet],
    layers: &[&str],
) -> Result<MaskPyramid<T>> {
    let (c, _, _) = masks.dims3()?;
    if c != classes.len() {
        return Err(Error::InvalidShape {
            shape: masks.shape().to_vec(),
            reason: format!("{} masks for {} classes", c, classes.len()),
        });
    }
    let mut by_depth: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    for &l in layers {
        by_depth.entry(pool_depth(l)?).or_default().push(l);
    }
    let mut levels = BTreeMap::new();
    let mut current = masks.clone();
    let mut depth = 0;
    for (target, names) in by_depth {
        while depth < target {
            current = avgpool2(&current)?.output;
            depth += 1;
        }
        for name in names {
            levels.insert(name.to_string(), current.clone());
        }
    }
    Ok(MaskPyramid {
        classes: classes.to_vec(),
        levels,
    })
}
