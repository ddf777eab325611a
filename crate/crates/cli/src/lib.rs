//! Command-line driver: validates a job, groups segmentation classes,
//! precomputes targets and runs the optimization.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::anyhow;
use clap::Parser;

use photostyle::matting::{build_matting_laplacian, load_or_build};
use photostyle::optim::{self, save_loss_log};
use photostyle::segmentation::{binary_masks, load_segmentation, Palette, Rgb, SegmentationMap};
use photostyle::semantics::{group_semantics, ClassSet, Substitutions, Taxonomy};
use photostyle::{
    image_io, ContrastScorer, Error, InitMode, LossConfig, MattingParams, Objective, RunConfig, Tensor32,
    VggModel32,
};

/// Largest image side accepted without `--allow-large-images`.
pub const DEFAULT_MAX_DIM: usize = 700;

#[derive(Debug, Clone, Parser)]
#[command(name = "photostyle", version, about = "Photorealistic style transfer with semantic grouping")]
pub struct Args {
    /// Content photograph.
    #[arg(long)]
    pub content: PathBuf,
    /// Style photograph.
    #[arg(long)]
    pub style: PathBuf,
    /// Color-coded segmentation of the content image (lossless format).
    #[arg(long)]
    pub content_seg: PathBuf,
    /// Color-coded segmentation of the style image (lossless format).
    #[arg(long)]
    pub style_seg: PathBuf,
    /// Palette file (`R,G,B<TAB>word[;word]`); defaults to the ADE20K palette.
    #[arg(long)]
    pub palette: Option<PathBuf>,
    /// Hypernym list (`child<TAB>parent`); defaults to the ADE20K taxonomy.
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    /// Word substitutions (`from<TAB>to`); defaults to the shipped list.
    #[arg(long)]
    pub substitutions: Option<PathBuf>,
    /// VGG-19 weight file.
    #[arg(long)]
    pub weights: PathBuf,
    /// Output PNG path.
    #[arg(long)]
    pub out: PathBuf,
    /// Semantic grouping threshold in [0, 1].
    #[arg(long, default_value_t = 0.6)]
    pub theta: f64,
    /// Initial transfer image: content, style or noise.
    #[arg(long, default_value = "content")]
    pub init: InitMode,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// α, on the content layer.
    #[arg(long, default_value_t = 1.0)]
    pub content_weight: f64,
    /// β, split evenly over the style layers.
    #[arg(long, default_value_t = 100.0)]
    pub style_weight: f64,
    /// λ, on the matting-Laplacian term.
    #[arg(long, default_value_t = 1e4)]
    pub photorealism_weight: f64,
    /// ϑ, on the assessment term.
    #[arg(long, default_value_t = 1e5)]
    pub assessment_weight: f64,
    #[arg(long, default_value_t = 2000)]
    pub iterations: usize,
    /// Largest accepted image side; values above 700 need --allow-large-images.
    #[arg(long, default_value_t = DEFAULT_MAX_DIM)]
    pub max_dim: usize,
    /// Acknowledge that sides above 700 pixels may exhaust memory.
    #[arg(long)]
    pub allow_large_images: bool,
    /// Directory for cached matting Laplacians.
    #[arg(long)]
    pub laplacian_cache: Option<PathBuf>,
    /// Write `<out>_iter<t>.png` every this many iterations; 0 disables.
    #[arg(long, default_value_t = 100)]
    pub checkpoint_every: usize,
}

/// A validated job.
#[derive(Debug, Clone, PartialEq)]
pub struct JobSpec {
    pub content: PathBuf,
    pub style: PathBuf,
    pub content_seg: PathBuf,
    pub style_seg: PathBuf,
    pub palette: Option<PathBuf>,
    pub taxonomy: Option<PathBuf>,
    pub substitutions: Option<PathBuf>,
    pub weights: PathBuf,
    pub out: PathBuf,
    pub theta: f64,
    pub init: InitMode,
    pub seed: u64,
    pub content_weight: f64,
    pub style_weight: f64,
    pub photorealism_weight: f64,
    pub assessment_weight: f64,
    pub iterations: usize,
    pub max_dim: usize,
    pub laplacian_cache: Option<PathBuf>,
    pub checkpoint_every: usize,
}

impl JobSpec {
    pub fn loss_config(&self) -> LossConfig {
        LossConfig::from_scalars(
            self.content_weight,
            self.style_weight,
            self.photorealism_weight,
            self.assessment_weight,
            self.theta,
        )
    }

    fn sibling(&self, suffix: &str) -> PathBuf {
        let stem = self.out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        self.out.with_file_name(format!("{stem}{suffix}"))
    }

    pub fn loss_log_path(&self) -> PathBuf {
        self.sibling("_loss.csv")
    }

    pub fn content_preview_path(&self) -> PathBuf {
        self.sibling("_content_groups.png")
    }

    pub fn style_preview_path(&self) -> PathBuf {
        self.sibling("_style_groups.png")
    }

    pub fn checkpoint_path(&self, iteration: usize) -> PathBuf {
        self.sibling(&format!("_iter{iteration}.png"))
    }
}

/// Failure of a run, carrying the process exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags or unreadable/inconsistent inputs.
    Input(anyhow::Error),
    /// Image larger than the configured maximum side.
    TooLarge(String),
    /// Non-finite values during optimization.
    Numeric(anyhow::Error),
    Other(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Input(_) => 2,
            Failure::TooLarge(_) => 3,
            Failure::Numeric(_) => 4,
            Failure::Other(_) => 1,
        }
    }

    fn from_core(err: Error, context: String) -> Self {
        let kind = classify(&err);
        let err = anyhow::Error::new(err).context(context);
        match kind {
            Kind::Input => Failure::Input(err),
            Kind::Numeric => Failure::Numeric(err),
            Kind::Other => Failure::Other(err),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Input(e) | Failure::Numeric(e) | Failure::Other(e) => write!(f, "{e:#}"),
            Failure::TooLarge(msg) => f.write_str(msg),
        }
    }
}

enum Kind {
    Input,
    Numeric,
    Other,
}

fn classify(err: &Error) -> Kind {
    match err {
        Error::Term { source, .. } => classify(source),
        Error::NonFiniteGradient(_) | Error::NonFinitePixel(_) => Kind::Numeric,
        Error::Io(_)
        | Error::Image(_)
        | Error::Weights(_)
        | Error::EmptyPalette
        | Error::PaletteSyntax { .. }
        | Error::UnknownColor { .. }
        | Error::LossySegmentation(_)
        | Error::MaskResolution { .. }
        | Error::EmptyWord
        | Error::UnknownWord(_)
        | Error::TaxonomySyntax { .. }
        | Error::TaxonomyStructure(_)
        | Error::EmptyClassTable
        | Error::InvalidThreshold(_)
        | Error::ImageTooSmall { .. }
        | Error::InvalidWeight { .. }
        | Error::NoFeatureWeights => Kind::Input,
        _ => Kind::Other,
    }
}

trait CoreContext<T> {
    fn ctx(self, what: impl FnOnce() -> String) -> Result<T, Failure>;
}

impl<T> CoreContext<T> for photostyle::Result<T> {
    fn ctx(self, what: impl FnOnce() -> String) -> Result<T, Failure> {
        self.map_err(|e| Failure::from_core(e, what()))
    }
}

fn require_file(flag: &str, path: &Path) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Input(anyhow!("--{flag}: {} does not exist", path.display())))
    }
}

/// Parses `argv` (program name first) and checks every path and range.
/// Help and version requests come back as [`clap::Error`] inside
/// `Failure::Input`; callers that print usage should use [`Args::try_parse_from`].
pub fn parse_and_validate<I, S>(argv: I) -> Result<JobSpec, Failure>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let args = Args::try_parse_from(argv).map_err(|e| Failure::Input(e.into()))?;
    validate(args)
}

pub fn validate(args: Args) -> Result<JobSpec, Failure> {
    for (flag, path) in [
        ("content", &args.content),
        ("style", &args.style),
        ("content-seg", &args.content_seg),
        ("style-seg", &args.style_seg),
        ("weights", &args.weights),
    ] {
        require_file(flag, path)?;
    }
    for (flag, path) in [
        ("palette", &args.palette),
        ("taxonomy", &args.taxonomy),
        ("substitutions", &args.substitutions),
    ] {
        if let Some(p) = path {
            require_file(flag, p)?;
        }
    }
    if !(0.0..=1.0).contains(&args.theta) {
        return Err(Failure::Input(anyhow!("--theta {} is outside [0, 1]", args.theta)));
    }
    let ext = args.out.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    if ext.as_deref() != Some("png") {
        return Err(Failure::Input(anyhow!("--out must name a .png file")));
    }
    if args.max_dim == 0 {
        return Err(Failure::Input(anyhow!("--max-dim must be positive")));
    }
    if args.max_dim > DEFAULT_MAX_DIM && !args.allow_large_images {
        return Err(Failure::Input(anyhow!(
            "--max-dim {} exceeds {DEFAULT_MAX_DIM}; add --allow-large-images to accept the memory cost",
            args.max_dim
        )));
    }
    let job = JobSpec {
        content: args.content,
        style: args.style,
        content_seg: args.content_seg,
        style_seg: args.style_seg,
        palette: args.palette,
        taxonomy: args.taxonomy,
        substitutions: args.substitutions,
        weights: args.weights,
        out: args.out,
        theta: args.theta,
        init: args.init,
        seed: args.seed,
        content_weight: args.content_weight,
        style_weight: args.style_weight,
        photorealism_weight: args.photorealism_weight,
        assessment_weight: args.assessment_weight,
        iterations: args.iterations,
        max_dim: args.max_dim,
        laplacian_cache: args.laplacian_cache,
        checkpoint_every: args.checkpoint_every,
    };
    job.loss_config().validate().ctx(|| "loss weights".into())?;
    Ok(job)
}

/// Files written by a successful run.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifacts {
    pub image: PathBuf,
    pub loss_log: PathBuf,
    pub content_preview: PathBuf,
    pub style_preview: PathBuf,
    pub checkpoints: Vec<PathBuf>,
}

fn check_size(what: &str, path: &Path, image: &Tensor32, max_dim: usize) -> Result<(), Failure> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    if h.max(w) > max_dim {
        return Err(Failure::TooLarge(format!(
            "{what} image {} is {w}x{h}; the largest side may be at most {max_dim} pixels. \
             Memory for the matting Laplacian and the feature maps grows with the pixel count, \
             and sides beyond {DEFAULT_MAX_DIM} pixels exhaust typical memory. Downscale the image, \
             or raise --max-dim together with --allow-large-images.",
            path.display()
        )));
    }
    Ok(())
}

fn load_classes(map: &SegmentationMap, subs: &Substitutions) -> Vec<ClassSet> {
    map.classes().iter().map(|c| c.substituted(subs)).collect()
}

/// One preview color per shared class: the palette color of the first
/// original class (content first, then style) that was merged into it.
fn group_colors(
    palette: &Palette,
    count: usize,
    sources: [(&SegmentationMap, &[usize]); 2],
) -> Result<Vec<Rgb>, Failure> {
    let mut colors: Vec<Option<Rgb>> = vec![None; count];
    for (map, mapping) in sources {
        for (class, &k) in map.classes().iter().zip(mapping) {
            if colors[k].is_none() {
                colors[k] = palette.color_of(class);
            }
        }
    }
    colors
        .into_iter()
        .enumerate()
        .map(|(k, c)| c.ok_or_else(|| Failure::Other(anyhow!("no preview color for shared class {k}"))))
        .collect()
}

/// Runs a validated job. `log` receives progress lines.
pub fn execute(job: &JobSpec, mut log: impl FnMut(&str)) -> Result<Artifacts, Failure> {
    let content: Tensor32 = image_io::load_rgb(&job.content).ctx(|| format!("reading {}", job.content.display()))?;
    let style: Tensor32 = image_io::load_rgb(&job.style).ctx(|| format!("reading {}", job.style.display()))?;
    check_size("content", &job.content, &content, job.max_dim)?;
    check_size("style", &job.style, &style, job.max_dim)?;

    let palette = match &job.palette {
        Some(p) => Palette::load(p).ctx(|| format!("reading palette {}", p.display()))?,
        None => Palette::ade20k(),
    }
    .repair()
    .ctx(|| "repairing palette".into())?;
    let taxonomy = match &job.taxonomy {
        Some(p) => std::fs::read_to_string(p)
            .map_err(Error::from)
            .and_then(|t| Taxonomy::parse(&t))
            .ctx(|| format!("reading taxonomy {}", p.display()))?,
        None => Taxonomy::ade20k(),
    };
    let subs = match &job.substitutions {
        Some(p) => std::fs::read_to_string(p)
            .map_err(Error::from)
            .and_then(|t| Substitutions::parse(&t))
            .ctx(|| format!("reading substitutions {}", p.display()))?,
        None => Substitutions::ade20k(),
    };

    let content_map =
        load_segmentation(&job.content_seg, &palette).ctx(|| format!("reading {}", job.content_seg.display()))?;
    let style_map =
        load_segmentation(&job.style_seg, &palette).ctx(|| format!("reading {}", job.style_seg.display()))?;
    for (map, image, path) in [(&content_map, &content, &job.content_seg), (&style_map, &style, &job.style_seg)] {
        let dims = (image.shape()[0], image.shape()[1]);
        if (map.height(), map.width()) != dims {
            return Err(Failure::Input(anyhow!(
                "segmentation {} is {}x{} but its image is {}x{}",
                path.display(),
                map.width(),
                map.height(),
                dims.1,
                dims.0
            )));
        }
    }

    let grouping = group_semantics(
        &taxonomy,
        &load_classes(&content_map, &subs),
        &load_classes(&style_map, &subs),
        job.theta,
    )
    .ctx(|| "semantic grouping".into())?;
    let names: Vec<String> = grouping.classes.iter().map(|c| c.to_string()).collect();
    log(&format!("shared classes: {}", names.join(" ")));
    let content_groups = content_map
        .relabel(&grouping.content_map, grouping.classes.clone())
        .ctx(|| "relabeling content segmentation".into())?;
    let style_groups = style_map
        .relabel(&grouping.style_map, grouping.classes.clone())
        .ctx(|| "relabeling style segmentation".into())?;
    let colors = group_colors(
        &palette,
        grouping.classes.len(),
        [(&content_map, &grouping.content_map), (&style_map, &grouping.style_map)],
    )?;

    let params = MattingParams::default();
    let laplacian = match &job.laplacian_cache {
        Some(dir) => load_or_build(dir, &content, params),
        None => build_matting_laplacian(&content, params),
    }
    .ctx(|| "matting Laplacian".into())?;
    let model = VggModel32::load_weights(&job.weights).ctx(|| format!("reading weights {}", job.weights.display()))?;

    let objective = Objective::new(
        &model,
        job.loss_config(),
        &content,
        &style,
        &binary_masks(&content_groups),
        &binary_masks(&style_groups),
        &grouping.classes,
    )
    .ctx(|| "preparing objective".into())?
    .with_laplacian(laplacian)
    .with_scorer(Box::new(ContrastScorer::default()));

    let init = optim::init_transfer_image(job.init, &content, &style, job.seed).ctx(|| "initialization".into())?;
    let config = RunConfig {
        iterations: job.iterations,
        ..RunConfig::default()
    };
    let mut checkpoints = Vec::new();
    let output = optim::run(&objective, &init, &config, |t, report, image| {
        let due = job.checkpoint_every > 0 && t > 0 && t % job.checkpoint_every == 0 && t < job.iterations;
        if due {
            let path = job.checkpoint_path(t);
            image_io::save_rgb(&path, image)?;
            checkpoints.push(path);
        }
        if due || t == 0 || t == job.iterations {
            log(&format!(
                "iteration {t}: total {:.6e} (content {:.3e}, style {:.3e}, photorealism {:.3e}, assessment {:.3e})",
                report.total, report.content, report.style, report.photorealism, report.assessment
            ));
        }
        Ok(())
    })
    .ctx(|| "optimization".into())?;

    let write = |what: &str, r: photostyle::Result<()>| {
        r.map_err(|e| Failure::Other(anyhow::Error::new(e).context(format!("writing {what}"))))
    };
    write("output image", image_io::save_rgb(&job.out, &output.image))?;
    write("loss log", save_loss_log(job.loss_log_path(), &output.log))?;
    let render = |map: &SegmentationMap, path: &Path| -> photostyle::Result<()> {
        map.render(&colors)?.save(path)?;
        Ok(())
    };
    write("content preview", render(&content_groups, &job.content_preview_path()))?;
    write("style preview", render(&style_groups, &job.style_preview_path()))?;

    Ok(Artifacts {
        image: job.out.clone(),
        loss_log: job.loss_log_path(),
        content_preview: job.content_preview_path(),
        style_preview: job.style_preview_path(),
        checkpoints,
    })
}
