//! End-to-end runs behind the `tsr` subcommands: synthetic data generation,
//! tiling, splitting, training, and slide scoring with evaluation.
//!
//! Every run derives its randomness from one root seed, and every JSON
//! output carries the tool version and a hash of the effective config.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::annotate::{self, AnnotateError, Annotation, LabelRule, TissueClass};
use crate::cohort::{self, CohortError, ManifestRow, SlideEntry, SplitConstraints, SplitTag};
use crate::model::{self, Classifier, ModelError, OracleClassifier, Sample, SetupConfig, SetupId, TrainConfig};
use crate::raster::{self, RasterError, Rect};
use crate::rng::derive;
use crate::scoring::{self, ScoringError, SlideEvaluation, SlideScore, StatsOptions};
use crate::stain::{self, ReferenceProfile, StainError};
use crate::synth::{self, CorpusKind, SynthError, SynthSpec, TextureParams};
use crate::tiler::{self, PatchRecord, StainFitMode, TilerError, TilingConfig};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PipelineError {
    /// Bad invocation or missing input; the CLI exits with status 2.
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Unscorable(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Stain(#[from] StainError),
    #[error(transparent)]
    Annotate(#[from] AnnotateError),
    #[error(transparent)]
    Tiler(#[from] TilerError),
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl PipelineError {
    /// Short error class used in `errors.csv`.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Usage(_) => "Usage",
            Self::Unscorable(_) => "Unscorable",
            Self::Raster(_) => "Raster",
            Self::Stain(_) => "Stain",
            Self::Annotate(_) => "Annotation",
            Self::Tiler(_) => "Tiling",
            Self::Cohort(_) => "Cohort",
            Self::Model(_) => "Classifier",
            Self::Scoring(_) => "Scoring",
            Self::Synth(_) => "Synth",
            Self::Csv(_) => "Csv",
            Self::Io(_) => "Io",
        }
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

/// Reads a required input file; a missing file is a usage error.
pub fn read_input(path: &Path) -> Result<String> {
    if !path.is_file() {
        return Err(PipelineError::Usage(format!("input file {} not found", path.display())));
    }
    Ok(fs::read_to_string(path)?)
}

/// Parses a JSON input; malformed content is a usage error.
pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_input(path)?)
        .map_err(|e| PipelineError::Usage(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// First 16 hex digits of SHA-256 over the compact JSON of `config`.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let json = serde_json::to_string(config).expect("serializable");
    Sha256::digest(json.as_bytes())[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Parameters shared by the scoring and tiling subcommands. Every field
/// has a default and is echoed into output metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 uses every core. Not echoed into outputs, which
    /// do not depend on it.
    #[serde(skip_serializing)]
    pub jobs: usize,
    pub strict: bool,
    pub patch_size: usize,
    /// Overrides the mode's default stride (160 annotated, 224 masked).
    pub stride: Option<usize>,
    pub min_coverage: f64,
    pub label_rule: LabelRule,
    pub normalize: bool,
    /// Fit one stain basis per slide instead of per patch.
    pub per_slide_fit: bool,
    pub reference_profile: Option<PathBuf>,
    pub cutoff: f64,
    pub stats: StatsOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            jobs: 0,
            strict: false,
            patch_size: tiler::DEFAULT_PATCH_SIZE,
            stride: None,
            min_coverage: tiler::DEFAULT_MIN_COVERAGE,
            label_rule: LabelRule::SingleClass,
            normalize: true,
            per_slide_fit: false,
            reference_profile: None,
            cutoff: scoring::DEFAULT_CUTOFF,
            stats: StatsOptions::default(),
        }
    }
}

impl RunConfig {
    pub fn reference(&self) -> Result<ReferenceProfile> {
        match &self.reference_profile {
            None => Ok(ReferenceProfile::default()),
            Some(p) => ReferenceProfile::from_json(&read_input(p)?)
                .map_err(|e| PipelineError::Usage(format!("{}: {e}", p.display()))),
        }
    }

    pub fn tiling(&self, annotated: bool) -> Result<TilingConfig> {
        let base = if annotated {
            TilingConfig::annotated()
        } else {
            TilingConfig::masked()
        };
        let overlap = if annotated {
            tiler::DEFAULT_TRAINING_OVERLAP.min(self.patch_size.saturating_sub(1))
        } else {
            0
        };
        let cfg = TilingConfig {
            patch_size: self.patch_size,
            overlap,
            stride: self.stride,
            min_coverage: self.min_coverage,
            normalize: self.normalize,
            label_rule: self.label_rule,
            reference: self.reference()?,
            ..base
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Run metadata written next to outputs.
#[derive(Debug, Clone, Serialize)]
pub struct RunMeta<'a, T: Serialize> {
    pub schema_version: u32,
    pub tool_version: &'static str,
    pub command: &'a str,
    pub config_hash: String,
    pub config: &'a T,
}

impl<'a, T: Serialize> RunMeta<'a, T> {
    pub fn new(command: &'a str, config: &'a T) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            tool_version: TOOL_VERSION,
            command,
            config_hash: config_hash(config),
            config,
        }
    }
}

// ---------------------------------------------------------------- synth

/// A synthetic corpus of labeled patches split into train and test parts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusPlan {
    pub name: String,
    pub kind: CorpusKind,
    pub n_train_per_class: usize,
    #[serde(default)]
    pub n_test_per_class: usize,
}

/// A batch of grid slides whose target TSRs cycle through `tsr_values`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlideBatchPlan {
    pub count: usize,
    pub cols: usize,
    pub rows: usize,
    #[serde(default)]
    pub background_fraction: f64,
    #[serde(default)]
    pub other_cells: usize,
    pub tsr_values: Vec<f64>,
    #[serde(default = "default_prefix")]
    pub prefix: String,
}

fn default_prefix() -> String {
    "slide".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct SynthPlan {
    pub seed: u64,
    pub slides: Option<SlideBatchPlan>,
    /// Explicit slides keyed by id.
    pub explicit_slides: BTreeMap<String, SynthSpec>,
    pub corpora: Vec<CorpusPlan>,
}

impl SynthPlan {
    /// Every slide spec, ordered by id.
    pub fn slide_specs(&self) -> Result<BTreeMap<String, SynthSpec>> {
        let mut specs = self.explicit_slides.clone();
        if let Some(b) = &self.slides {
            if b.tsr_values.is_empty() {
                return Err(PipelineError::Usage("slides.tsr_values is empty".into()));
            }
            for i in 0..b.count {
                let id = format!("{}{:03}", b.prefix, i);
                let spec = SynthSpec {
                    seed: derive(self.seed, &id),
                    width: b.cols * tiler::DEFAULT_PATCH_SIZE,
                    height: b.rows * tiler::DEFAULT_PATCH_SIZE,
                    class_layout: vec![],
                    background_fraction: b.background_fraction,
                    other_cells: b.other_cells,
                    target_tsr: Some(b.tsr_values[i % b.tsr_values.len()]),
                };
                if specs.insert(id.clone(), spec).is_some() {
                    return Err(PipelineError::Usage(format!("duplicate slide id {id}")));
                }
            }
        }
        Ok(specs)
    }
}

pub fn annotation_path(dir: &Path, slide_id: &str) -> PathBuf {
    dir.join(format!("{slide_id}.annotation.json"))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthSummary {
    pub slides: usize,
    pub corpora: BTreeMap<String, usize>,
}

/// Writes `slides/` (PPM + sidecar + annotation per slide, `manifest.csv`,
/// `truth.csv`) and `corpora/<name>/` (PPM per patch + `split.csv`).
pub fn run_synth(plan: &SynthPlan, out: &Path) -> Result<SynthSummary> {
    let params = TextureParams::default();
    let specs = plan.slide_specs()?;
    let slides_dir = out.join("slides");
    if !specs.is_empty() {
        fs::create_dir_all(&slides_dir)?;
        let rendered = specs
            .par_iter()
            .map(|(id, spec)| Ok((id, synth::gen_slide(spec, &params)?)))
            .collect::<Result<Vec<_>>>()?;
        let mut manifest = csv::Writer::from_path(slides_dir.join("manifest.csv"))?;
        manifest.write_record(["slide_id", "width", "height", "n_tumor", "n_stroma", "n_other"])?;
        let mut truth = csv::Writer::from_path(slides_dir.join("truth.csv"))?;
        truth.write_record(["slide_id", "true_tsr"])?;
        for (id, slide) in &rendered {
            raster::write_image(&slides_dir.join(format!("{id}.ppm")), &slide.image)?;
            fs::write(annotation_path(&slides_dir, id), slide.annotation.to_json())?;
            let g = slide.ground_truth;
            manifest.write_record([
                id.to_string(),
                slide.image.width().to_string(),
                slide.image.height().to_string(),
                g.n_tumor.to_string(),
                g.n_stroma.to_string(),
                g.n_other.to_string(),
            ])?;
            if let Some(t) = g.tsr() {
                truth.write_record([id.to_string(), format!("{}", (t * 100.0).round() as u32)])?;
            }
        }
        manifest.flush()?;
        truth.flush()?;
    }

    let mut corpora = BTreeMap::new();
    for c in &plan.corpora {
        let dir = out.join("corpora").join(&c.name);
        fs::create_dir_all(&dir)?;
        let seed = derive(plan.seed, &format!("corpus/{}", c.name));
        let mut rows = Vec::new();
        for (split, n, prefix) in [
            (SplitTag::Train, c.n_train_per_class, "train_"),
            (SplitTag::Test, c.n_test_per_class, "test_"),
        ] {
            let patches = synth::gen_corpus(
                c.kind,
                &TissueClass::ALL,
                n,
                &params,
                derive(seed, prefix),
                &format!("{}_{prefix}", c.name),
            );
            for p in patches {
                raster::write_ppm(&dir.join(format!("{}.ppm", p.patch_id)), &p.pixels)?;
                rows.push(ManifestRow {
                    patch_id: p.patch_id,
                    slide_id: c.name.clone(),
                    class: p.class,
                    split,
                });
            }
        }
        cohort::write_manifest(&dir.join("split.csv"), &rows)?;
        corpora.insert(c.name.clone(), rows.len());
    }
    Ok(SynthSummary {
        slides: specs.len(),
        corpora,
    })
}

// ---------------------------------------------------------------- slides

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlideFiles {
    pub slide_id: String,
    pub image: PathBuf,
    pub annotation: Option<PathBuf>,
}

/// Every `*.ppm` in `dir`, sorted by slide id.
pub fn discover_slides(dir: &Path) -> Result<Vec<SlideFiles>> {
    if !dir.is_dir() {
        return Err(PipelineError::Usage(format!("slide directory {} not found", dir.display())));
    }
    let mut slides = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "ppm") {
            let id = path.file_stem().expect("has extension").to_string_lossy().into_owned();
            let ann = annotation_path(dir, &id);
            slides.push(SlideFiles {
                annotation: ann.is_file().then_some(ann),
                slide_id: id,
                image: path,
            });
        }
    }
    slides.sort_by(|a, b| a.slide_id.cmp(&b.slide_id));
    Ok(slides)
}

/// `slide_id,true_tsr` with integer percentages.
pub fn read_truth(path: &Path) -> Result<BTreeMap<String, u8>> {
    if !path.is_file() {
        return Err(PipelineError::Usage(format!("truth file {} not found", path.display())));
    }
    #[derive(Deserialize)]
    struct Row {
        slide_id: String,
        true_tsr: u8,
    }
    let mut out = BTreeMap::new();
    for row in csv::Reader::from_path(path)?.deserialize() {
        let r: Row = row?;
        out.insert(r.slide_id, r.true_tsr);
    }
    Ok(out)
}

fn build_pool(jobs: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .expect("thread pool")
}

/// Tissue-masked, optionally normalized patches of one slide.
pub fn masked_patches(slide_id: &str, img: &raster::RgbImage, cfg: &RunConfig) -> Result<Vec<PatchRecord>> {
    let mut tcfg = cfg.tiling(false)?;
    let mask = match raster::tissue_mask(img) {
        Err(raster::RasterError::DegenerateHistogram) => {
            return Err(PipelineError::Unscorable("no tissue: uniform luminance".into()))
        }
        other => other?,
    };
    if cfg.normalize && cfg.per_slide_fit {
        tcfg.stain_fit = StainFitMode::Fixed(stain::fit_source(img)?);
    }
    Ok(tiler::tile_masked(slide_id, img, &mask, &tcfg)?)
}

/// mask -> tile -> normalize -> classify -> count.
pub fn score_slide_image(
    slide_id: &str,
    img: &raster::RgbImage,
    classifier: &dyn Classifier,
    cfg: &RunConfig,
) -> Result<SlideScore> {
    let patches = masked_patches(slide_id, img, cfg)?;
    if patches.is_empty() {
        return Err(PipelineError::Unscorable("no tissue patches".into()));
    }
    let labels: Vec<TissueClass> = model::classify_manifest(classifier, &patches)?
        .into_iter()
        .map(|(l, _)| l)
        .collect();
    let score = scoring::score_slide(slide_id, &labels)?;
    if !score.is_scorable() {
        return Err(PipelineError::Unscorable("no tumor or stroma patches".into()));
    }
    Ok(score)
}

/// How patches are classified during scoring.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClassifierSource {
    Checkpoint(PathBuf),
    Predictions(PathBuf),
    /// Ground truth from each slide's annotation file.
    Oracle,
}

pub fn load_classifier(source: &ClassifierSource, slides: &[SlideFiles], cfg: &RunConfig) -> Result<Box<dyn Classifier>> {
    Ok(match source {
        ClassifierSource::Checkpoint(p) => {
            read_input_exists(p)?;
            Box::new(model::MiniNet::load(p)?)
        }
        ClassifierSource::Predictions(p) => {
            read_input_exists(p)?;
            Box::new(model::ExternalClassifier::from_path(p)?)
        }
        ClassifierSource::Oracle => {
            let mut oracle = OracleClassifier::new(cfg.min_coverage);
            for s in slides {
                let Some(path) = &s.annotation else {
                    return Err(PipelineError::Usage(format!(
                        "oracle classifier needs {}",
                        annotation_path(s.image.parent().unwrap_or(Path::new(".")), &s.slide_id).display()
                    )));
                };
                let (w, h) = raster::read_image(&s.image).map(|i| (i.width(), i.height()))?;
                let ann = annotate::parse_annotations(path)?;
                oracle.insert(s.slide_id.clone(), annotate::rasterize(&ann, w, h));
            }
            Box::new(oracle)
        }
    })
}

fn read_input_exists(p: &Path) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(PipelineError::Usage(format!("input file {} not found", p.display())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlideFailure {
    pub slide_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineOutput {
    pub scores: Vec<SlideScore>,
    pub failures: Vec<SlideFailure>,
    pub evaluation: Option<SlideEvaluation>,
}

/// Scores every slide; failures are collected unless `cfg.strict`, in which
/// case the first failure (in slide order) is returned.
pub fn run_pipeline(
    slides: &[SlideFiles],
    classifier: &dyn Classifier,
    truth: &BTreeMap<String, u8>,
    cfg: &RunConfig,
) -> Result<PipelineOutput> {
    let pool = build_pool(cfg.jobs);
    let results: Vec<Result<SlideScore>> = pool.install(|| {
        slides
            .par_iter()
            .map(|s| {
                let img = raster::read_image(&s.image)?;
                score_slide_image(&s.slide_id, &img, classifier, cfg)
            })
            .collect()
    });
    let mut scores = Vec::new();
    let mut failures = Vec::new();
    for (s, r) in slides.iter().zip(results) {
        match r {
            Ok(score) => scores.push(score),
            Err(e) if cfg.strict => return Err(e),
            Err(e) => {
                warn!("{}: {e}", s.slide_id);
                failures.push(SlideFailure {
                    slide_id: s.slide_id.clone(),
                    error: format!("{}: {e}", e.kind()),
                });
            }
        }
    }
    let evaluation = if truth.is_empty() {
        None
    } else {
        Some(scoring::evaluate_slides(&scores, truth, cfg.cutoff, cfg.stats)?)
    };
    info!("scored {} slides, {} failed", scores.len(), failures.len());
    Ok(PipelineOutput {
        scores,
        failures,
        evaluation,
    })
}

pub fn write_scores(path: &Path, scores: &[SlideScore], cutoff: f64) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["slide_id", "n_tumor", "n_stroma", "n_other", "tsr_percent", "category"])?;
    for s in scores {
        let t = s.tsr().expect("only scorable slides are written");
        w.write_record([
            s.slide_id.clone(),
            s.n_tumor.to_string(),
            s.n_stroma.to_string(),
            s.n_other.to_string(),
            format!("{:.6}", t * 100.0),
            scoring::stroma_category(t, cutoff).name().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scores(path: &Path) -> Result<Vec<SlideScore>> {
    if !path.is_file() {
        return Err(PipelineError::Usage(format!("scores file {} not found", path.display())));
    }
    #[derive(Deserialize)]
    struct Row {
        slide_id: String,
        n_tumor: u64,
        n_stroma: u64,
        n_other: u64,
    }
    let mut out = Vec::new();
    for row in csv::Reader::from_path(path)?.deserialize() {
        let r: Row = row?;
        out.push(SlideScore {
            slide_id: r.slide_id,
            n_tumor: r.n_tumor,
            n_stroma: r.n_stroma,
            n_other: r.n_other,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport<'a> {
    #[serde(flatten)]
    pub meta: RunMeta<'a, RunConfig>,
    pub n_scored: usize,
    pub n_failed: usize,
    pub evaluation: Option<&'a SlideEvaluation>,
}

/// `scores.csv`, `errors.csv` and `eval.json`.
pub fn write_pipeline_outputs(out: &Path, output: &PipelineOutput, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(out)?;
    write_scores(&out.join("scores.csv"), &output.scores, cfg.cutoff)?;
    let mut w = csv::Writer::from_path(out.join("errors.csv"))?;
    w.write_record(["slide_id", "error"])?;
    for f in &output.failures {
        w.write_record([&f.slide_id, &f.error])?;
    }
    w.flush()?;
    write_eval(&out.join("eval.json"), "score", output.scores.len(), output.failures.len(), output.evaluation.as_ref(), cfg)
}

pub fn write_eval(
    path: &Path,
    command: &str,
    n_scored: usize,
    n_failed: usize,
    evaluation: Option<&SlideEvaluation>,
    cfg: &RunConfig,
) -> Result<()> {
    write_json(
        path,
        &EvalReport {
            meta: RunMeta::new(command, cfg),
            n_scored,
            n_failed,
            evaluation,
        },
    )
}

/// Per-category tables derived from an evaluation.
pub fn write_report_tables(out: &Path, ev: &SlideEvaluation) -> Result<()> {
    fs::create_dir_all(out)?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
    let mut w = csv::Writer::from_path(out.join("deciles.csv"))?;
    w.write_record(["true_tsr", "n", "mean", "median", "see", "std"])?;
    for r in &ev.deciles.rows {
        w.write_record([
            r.category.to_string(),
            r.n.to_string(),
            opt(r.mean),
            opt(r.median),
            opt(r.see),
            opt(r.std),
        ])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(out.join("categories.csv"))?;
    w.write_record(["true_category", "predicted_low", "predicted_high"])?;
    for (name, row) in ["low", "high"].iter().zip(ev.category_confusion) {
        w.write_record([name.to_string(), row[0].to_string(), row[1].to_string()])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(out.join("summary.csv"))?;
    w.write_record(["metric", "value"])?;
    for (k, v) in [
        ("pearson_r", ev.pearson_r),
        ("see", ev.see),
        ("see_n_minus_2", ev.see_n_minus_2),
        ("cohen_kappa", ev.cohen_kappa),
    ] {
        w.write_record([k.to_string(), opt(v)])?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------- tiling

/// Tiles every slide in `slides` into `out` (`manifest.csv` plus PPMs).
/// Annotated mode needs each slide's annotation file.
pub fn run_tile(slides: &[SlideFiles], annotated: bool, cfg: &RunConfig, out: &Path) -> Result<usize> {
    let pool = build_pool(cfg.jobs);
    let per_slide: Vec<Result<Vec<PatchRecord>>> = pool.install(|| {
        slides
            .par_iter()
            .map(|s| {
                let img = raster::read_image(&s.image)?;
                if annotated {
                    let path = s.annotation.as_ref().ok_or_else(|| {
                        PipelineError::Usage(format!("slide {} has no annotation file", s.slide_id))
                    })?;
                    let ann = annotate::parse_annotations(path)?;
                    let lm = annotate::rasterize(&ann, img.width(), img.height());
                    let mut tcfg = cfg.tiling(true)?;
                    if cfg.normalize && cfg.per_slide_fit {
                        tcfg.stain_fit = StainFitMode::Fixed(stain::fit_source(&img)?);
                    }
                    Ok(tiler::tile_annotated(&s.slide_id, &img, &lm, &tcfg)?)
                } else {
                    masked_patches(&s.slide_id, &img, cfg)
                }
            })
            .collect()
    });
    let mut all = Vec::new();
    for (s, r) in slides.iter().zip(per_slide) {
        match r {
            Ok(p) => all.extend(p),
            Err(e) if cfg.strict => return Err(e),
            Err(e) => warn!("{}: skipped ({e})", s.slide_id),
        }
    }
    tiler::write_patches(out, &all)?;
    Ok(all.len())
}

/// One row of a tiler `manifest.csv`.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct TileRow {
    pub slide_id: String,
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    pub label: String,
}

impl TileRow {
    pub fn rect(&self) -> Rect {
        Rect::new(self.x, self.y, self.w, self.h)
    }

    pub fn patch_id(&self) -> String {
        tiler::patch_id(&self.slide_id, self.rect())
    }
}

pub fn read_tile_manifest(path: &Path) -> Result<Vec<TileRow>> {
    read_input_exists(path)?;
    let mut out = Vec::new();
    for row in csv::Reader::from_path(path)?.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

// ---------------------------------------------------------------- split

/// Slide-level constrained train/test split of a labeled tile directory,
/// written as `split.csv` (`patch_id,slide_id,class,split`).
pub fn run_split(tile_dir: &Path, seed: u64, constraints: &SplitConstraints, out: &Path) -> Result<cohort::SplitResult> {
    let tiles = read_tile_manifest(&tile_dir.join("manifest.csv"))?;
    let mut rows = Vec::new();
    for t in &tiles {
        let class: TissueClass = t
            .label
            .parse()
            .map_err(|_| PipelineError::Usage(format!("tile {} has no class label", t.patch_id())))?;
        rows.push(ManifestRow {
            patch_id: t.patch_id(),
            slide_id: t.slide_id.clone(),
            class,
            split: SplitTag::Train,
        });
    }
    let entries: Vec<SlideEntry> = cohort::slide_entries(&rows);
    let result = cohort::split_with_constraints(&entries, seed, constraints)?;
    let test: std::collections::BTreeSet<&str> = result.test_slides.iter().map(String::as_str).collect();
    for r in &mut rows {
        if test.contains(r.slide_id.as_str()) {
            r.split = SplitTag::Test;
        }
    }
    cohort::write_manifest(out, &rows)?;
    Ok(result)
}

// ---------------------------------------------------------------- training

/// A corpus directory: `split.csv` plus `<patch_id>.ppm` files.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusData {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Loads a corpus, normalizing patches when asked (a patch whose stain fit
/// fails is used as is).
pub fn load_corpus(dir: &Path, normalize: Option<&ReferenceProfile>) -> Result<CorpusData> {
    let manifest = dir.join("split.csv");
    read_input_exists(&manifest)?;
    let rows = cohort::read_manifest(&manifest)?;
    let samples = rows
        .par_iter()
        .map(|r| {
            let img = raster::read_image(&dir.join(format!("{}.ppm", r.patch_id)))?;
            let img = match normalize {
                Some(reference) => stain::normalize(&img, reference).unwrap_or(img),
                None => img,
            };
            Ok((r.split == SplitTag::Test, Sample::new(&img, r.class)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let (test, train): (Vec<_>, Vec<_>) = samples.into_iter().partition(|(t, _)| *t);
    Ok(CorpusData {
        train: train.into_iter().map(|(_, s)| s).collect(),
        test: test.into_iter().map(|(_, s)| s).collect(),
    })
}

/// Hyperparameters for the training harness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainPlan {
    /// Candidate target-stage configs for cross-validation.
    pub grid: Vec<TrainConfig>,
    pub folds: usize,
    pub generic: TrainConfig,
    pub domain: TrainConfig,
    /// Stain-normalize target and domain patches before training.
    pub normalize: bool,
}

impl Default for TrainPlan {
    fn default() -> Self {
        let target = TrainConfig::default();
        let pre = TrainConfig {
            epochs_max: 10,
            ..target
        };
        Self {
            grid: vec![
                target,
                TrainConfig {
                    learning_rate: 0.02,
                    ..target
                },
            ],
            folds: 5,
            generic: pre,
            domain: pre,
            normalize: true,
        }
    }
}

impl TrainPlan {
    /// Replaces every stage seed with one derived from `seed`.
    pub fn seeded(&self, seed: u64) -> Self {
        let mut p = self.clone();
        for (i, g) in p.grid.iter_mut().enumerate() {
            g.seed = derive(seed, &format!("target/{i}"));
        }
        p.generic.seed = derive(seed, "generic");
        p.domain.seed = derive(seed, "domain");
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SetupReport {
    pub setup: &'static str,
    pub cv_accuracy: f64,
    pub validation_accuracy: f64,
    pub test_accuracy: f64,
    pub chosen: TrainConfig,
    pub cv: model::CvResult,
    pub provenance: model::Provenance,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub schema_version: u32,
    pub tool_version: &'static str,
    pub config_hash: String,
    pub seed: u64,
    pub plan: TrainPlan,
    pub setups: Vec<SetupReport>,
}

/// For each setup: pretrain, pick the target config by k-fold CV from the
/// pretrained weights, train with early stopping, measure test accuracy.
pub fn run_training(
    setups: &[SetupId],
    generic: Option<&CorpusData>,
    domain: Option<&CorpusData>,
    target: &CorpusData,
    plan: &TrainPlan,
    seed: u64,
) -> Result<(TrainReport, Vec<model::MiniNet>)> {
    if plan.grid.is_empty() {
        return Err(ModelError::EmptyGrid.into());
    }
    if target.train.is_empty() {
        return Err(ModelError::MissingCorpus("target").into());
    }
    let plan = plan.seeded(seed);
    let empty: Vec<Sample> = Vec::new();
    let mut reports = Vec::new();
    let mut nets = Vec::new();
    for &id in setups {
        let (needs_generic, needs_domain) = id.pretraining();
        let g = generic.map_or(&empty, |c| &c.train);
        let d = domain.map_or(&empty, |c| &c.train);
        if needs_generic && g.is_empty() {
            return Err(ModelError::MissingCorpus("generic").into());
        }
        if needs_domain && d.is_empty() {
            return Err(ModelError::MissingCorpus("domain").into());
        }
        let mut cfg = SetupConfig {
            init_seed: derive(seed, "init"),
            generic: plan.generic,
            domain: plan.domain,
            target: plan.grid[0],
        };
        info!("{}: pretraining", id.name());
        let (pretrained, stages) = model::pretrain_setup(id, g, d, &cfg)?;
        info!("{}: {}-fold cross-validation over {} configs", id.name(), plan.folds, plan.grid.len());
        let cv = model::cross_validate(&plan.grid, &target.train, plan.folds, derive(seed, "folds"), &pretrained)?;
        cfg.target = cv.best;
        let result = model::finish_setup(id, &pretrained, stages, &target.train, &cfg)?;
        let test_accuracy = result.net.accuracy(&target.test);
        info!("{}: test accuracy {test_accuracy:.4}", id.name());
        reports.push(SetupReport {
            setup: id.name(),
            cv_accuracy: cv.scores[cv.best_index],
            validation_accuracy: result.provenance.validation_accuracy,
            test_accuracy,
            chosen: cv.best,
            cv,
            provenance: result.provenance,
        });
        nets.push(result.net);
    }
    Ok((
        TrainReport {
            schema_version: SCHEMA_VERSION,
            tool_version: TOOL_VERSION,
            config_hash: config_hash(&(&plan, seed)),
            seed,
            plan,
            setups: reports,
        },
        nets,
    ))
}

/// `report.json`, `accuracy_table.csv` and one checkpoint per setup.
pub fn write_training_outputs(out: &Path, report: &TrainReport, nets: &[model::MiniNet]) -> Result<()> {
    fs::create_dir_all(out)?;
    write_json(&out.join("report.json"), report)?;
    let mut w = csv::Writer::from_path(out.join("accuracy_table.csv"))?;
    w.write_record(["setup", "cv_accuracy", "validation_accuracy", "test_accuracy"])?;
    for s in &report.setups {
        w.write_record([
            s.setup.to_string(),
            format!("{:.6}", s.cv_accuracy),
            format!("{:.6}", s.validation_accuracy),
            format!("{:.6}", s.test_accuracy),
        ])?;
    }
    w.flush()?;
    for (s, net) in report.setups.iter().zip(nets) {
        net.save(&out.join(format!("{}.mnet", s.setup.to_ascii_lowercase())))?;
    }
    Ok(())
}

// ---------------------------------------------------------------- classify

/// Classifies every tile listed in `tile_dir/manifest.csv` and writes a
/// predictions CSV that can be fed back as an external classifier.
pub fn run_classify(tile_dir: &Path, classifier: &dyn Classifier, cfg: &RunConfig, out: &Path) -> Result<usize> {
    let tiles = read_tile_manifest(&tile_dir.join("manifest.csv"))?;
    let pool = build_pool(cfg.jobs);
    let probs = pool.install(|| {
        tiles
            .par_iter()
            .map(|t| {
                let id = t.patch_id();
                let pixels = raster::read_image(&tile_dir.join(format!("{id}.ppm")))?;
                let p = classifier.classify(&model::PatchRef {
                    patch_id: &id,
                    slide_id: &t.slide_id,
                    rect: t.rect(),
                    pixels: &pixels,
                })?;
                Ok((id, p))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut w = csv::Writer::from_path(out)?;
    w.write_record(["patch_id", "p_tumor", "p_stroma", "p_other"])?;
    for (id, p) in &probs {
        w.write_record([
            id.clone(),
            format!("{:.12}", p.p[0]),
            format!("{:.12}", p.p[1]),
            format!("{:.12}", p.p[2]),
        ])?;
    }
    w.flush()?;
    Ok(probs.len())
}

/// Synthetic slides' ground truth as an annotation, for callers that build
/// slides in memory.
pub fn oracle_from_annotations<'a>(
    slides: impl IntoIterator<Item = (&'a str, &'a Annotation, usize, usize)>,
    min_coverage: f64,
) -> OracleClassifier {
    let mut o = OracleClassifier::new(min_coverage);
    for (id, ann, w, h) in slides {
        o.insert(id, annotate::rasterize(ann, w, h));
    }
    o
}
