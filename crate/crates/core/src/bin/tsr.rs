//! `tsr`: command-line front end of the scoring pipeline.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use tsr_core::annotate::LabelRule;
use tsr_core::cohort::SplitConstraints;
use tsr_core::model::{Classifier, ExternalClassifier, MiniNet, SetupId};
use tsr_core::pipeline::{self as pl, ClassifierSource, PipelineError, RunConfig, RunMeta};
use tsr_core::scoring;

#[derive(Parser)]
#[command(name = "tsr", version, about = "Tumor-stroma ratio scoring for stained tissue slides")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// JSON run config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed for every random stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Abort on the first per-slide error.
    #[arg(long, global = true)]
    strict: bool,
    /// Tiling stride in pixels.
    #[arg(long, global = true)]
    stride: Option<usize>,
    /// single-class or any-annotated-majority.
    #[arg(long, global = true)]
    label_rule: Option<LabelRule>,
    /// Skip stain normalization.
    #[arg(long, global = true)]
    no_normalize: bool,
    /// Fit one stain basis per slide rather than per patch.
    #[arg(long, global = true)]
    per_slide_fit: bool,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct ClassifierArgs {
    /// MiniNet checkpoint.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Predictions CSV (`patch_id,p_tumor,p_stroma,p_other`).
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Use each slide's annotation as ground truth.
    #[arg(long)]
    oracle: bool,
}

impl ClassifierArgs {
    fn source(&self) -> ClassifierSource {
        match (&self.model, &self.predictions) {
            (Some(p), _) => ClassifierSource::Checkpoint(p.clone()),
            (_, Some(p)) => ClassifierSource::Predictions(p.clone()),
            _ => ClassifierSource::Oracle,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic slides and patch corpora from a JSON plan.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cut slides into patches (annotated training tiles or masked tiles).
    Tile {
        #[arg(long)]
        slides: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Label windows from annotation files instead of the tissue mask.
        #[arg(long)]
        annotated: bool,
    },
    /// Slide-level train/test split of labeled tiles.
    Split {
        #[arg(long)]
        tiles: PathBuf,
        /// Defaults to `<tiles>/split.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 80)]
        max_diff: usize,
        #[arg(long, default_value_t = 900)]
        min_test: usize,
        #[arg(long, default_value_t = 0.10)]
        test_fraction: f64,
        #[arg(long, default_value_t = 10_000)]
        max_attempts: usize,
    },
    /// Cross-validate, pretrain and train MiniNet setups.
    Train {
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        domain: Option<PathBuf>,
        #[arg(long)]
        generic: Option<PathBuf>,
        /// 1, 2, 3 or all.
        #[arg(long, default_value = "all")]
        setup: String,
        /// JSON training plan (grid, folds, pretraining configs).
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Classify tiles into a predictions CSV.
    Classify {
        #[arg(long)]
        tiles: PathBuf,
        #[command(flatten)]
        classifier: ClassifierArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full pipeline: mask, tile, normalize, classify, score, evaluate.
    Score {
        #[arg(long)]
        slides: PathBuf,
        #[command(flatten)]
        classifier: ClassifierArgs,
        /// `slide_id,true_tsr`; defaults to `<slides>/truth.csv` when present.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a scores CSV with true TSRs and write eval.json.
    Evaluate {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-category tables from a scores CSV and true TSRs.
    Report {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run_config(g: &GlobalArgs) -> pl::Result<RunConfig> {
    let mut c = match &g.config {
        Some(p) => pl::read_json::<RunConfig>(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        c.seed = s;
    }
    if let Some(j) = g.jobs {
        c.jobs = j;
    }
    if g.strict {
        c.strict = true;
    }
    if g.stride.is_some() {
        c.stride = g.stride;
    }
    if let Some(r) = g.label_rule {
        c.label_rule = r;
    }
    if g.no_normalize {
        c.normalize = false;
    }
    if g.per_slide_fit {
        c.per_slide_fit = true;
    }
    Ok(c)
}

fn write_meta<T: Serialize>(path: &Path, command: &str, config: &T) -> pl::Result<()> {
    let text = serde_json::to_string_pretty(&RunMeta::new(command, config)).expect("serializable");
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn parse_setups(s: &str) -> pl::Result<Vec<SetupId>> {
    if s.eq_ignore_ascii_case("all") {
        return Ok(SetupId::ALL.to_vec());
    }
    s.split(',')
        .map(|p| p.trim().parse::<SetupId>().map_err(PipelineError::Usage))
        .collect()
}

fn run(cli: Cli) -> pl::Result<()> {
    let cfg = run_config(&cli.global)?;
    match cli.command {
        Command::Synth { spec, out } => {
            let mut plan: pl::SynthPlan = pl::read_json(&spec)?;
            if let Some(s) = cli.global.seed {
                plan.seed = s;
            }
            let summary = pl::run_synth(&plan, &out)?;
            write_meta(&out.join("run.json"), "synth", &plan)?;
            log::info!("wrote {} slides and {} corpora", summary.slides, summary.corpora.len());
        }
        Command::Tile { slides, out, annotated } => {
            let files = pl::discover_slides(&slides)?;
            let n = pl::run_tile(&files, annotated, &cfg, &out)?;
            write_meta(&out.join("run.json"), "tile", &cfg)?;
            log::info!("wrote {n} patches");
        }
        Command::Split {
            tiles,
            out,
            max_diff,
            min_test,
            test_fraction,
            max_attempts,
        } => {
            let c = SplitConstraints {
                max_diff,
                min_test_per_class: min_test,
                min_test_fraction: test_fraction,
                max_attempts,
            };
            let out = out.unwrap_or_else(|| tiles.join("split.csv"));
            let result = pl::run_split(&tiles, cfg.seed, &c, &out)?;
            #[derive(Serialize)]
            struct SplitEcho<'a> {
                seed: u64,
                constraints: &'a SplitConstraints,
                result: &'a tsr_core::cohort::SplitResult,
            }
            let echo = SplitEcho {
                seed: cfg.seed,
                constraints: &c,
                result: &result,
            };
            write_meta(&out.with_extension("run.json"), "split", &echo)?;
        }
        Command::Train {
            target,
            domain,
            generic,
            setup,
            grid,
            out,
        } => {
            let setups = parse_setups(&setup)?;
            let plan: pl::TrainPlan = match &grid {
                Some(p) => pl::read_json(p)?,
                None => pl::TrainPlan::default(),
            };
            let reference = cfg.reference()?;
            let norm = (plan.normalize && cfg.normalize).then_some(&reference);
            let needs_generic = setups.iter().any(|s| s.pretraining().0);
            let needs_domain = setups.iter().any(|s| s.pretraining().1);
            let load = |dir: &Option<PathBuf>, needed: bool, name: &'static str, n| -> pl::Result<_> {
                match dir {
                    Some(d) => Ok(Some(pl::load_corpus(d, n)?)),
                    None if needed => Err(tsr_core::model::ModelError::MissingCorpus(name).into()),
                    None => Ok(None),
                }
            };
            let generic = load(&generic, needs_generic, "generic", None)?;
            let domain = load(&domain, needs_domain, "domain", norm)?;
            let target = pl::load_corpus(&target, norm)?;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.jobs)
                .build()
                .expect("thread pool");
            let (report, nets) = pool.install(|| {
                pl::run_training(&setups, generic.as_ref(), domain.as_ref(), &target, &plan, cfg.seed)
            })?;
            pl::write_training_outputs(&out, &report, &nets)?;
        }
        Command::Classify { tiles, classifier, out } => {
            let source = classifier.source();
            let c: Box<dyn Classifier> = match &source {
                ClassifierSource::Checkpoint(p) => Box::new(MiniNet::load(&must_exist(p)?)?),
                ClassifierSource::Predictions(p) => Box::new(ExternalClassifier::from_path(&must_exist(p)?)?),
                ClassifierSource::Oracle => {
                    return Err(PipelineError::Usage(
                        "classify needs --model or --predictions; the oracle needs slides".into(),
                    ))
                }
            };
            let n = pl::run_classify(&tiles, c.as_ref(), &cfg, &out)?;
            write_meta(&out.with_extension("run.json"), "classify", &cfg)?;
            log::info!("classified {n} patches");
        }
        Command::Score {
            slides,
            classifier,
            truth,
            out,
        } => {
            let files = pl::discover_slides(&slides)?;
            let truth = match truth {
                Some(p) => pl::read_truth(&p)?,
                None if slides.join("truth.csv").is_file() => pl::read_truth(&slides.join("truth.csv"))?,
                None => Default::default(),
            };
            let c = pl::load_classifier(&classifier.source(), &files, &cfg)?;
            let output = pl::run_pipeline(&files, c.as_ref(), &truth, &cfg)?;
            pl::write_pipeline_outputs(&out, &output, &cfg)?;
        }
        Command::Evaluate { scores, truth, out } => {
            let scores = pl::read_scores(&scores)?;
            let truth = pl::read_truth(&truth)?;
            let ev = scoring::evaluate_slides(&scores, &truth, cfg.cutoff, cfg.stats)?;
            pl::write_eval(&out, "evaluate", scores.len(), 0, Some(&ev), &cfg)?;
        }
        Command::Report { scores, truth, out } => {
            let scores = pl::read_scores(&scores)?;
            let truth = pl::read_truth(&truth)?;
            let ev = scoring::evaluate_slides(&scores, &truth, cfg.cutoff, cfg.stats)?;
            pl::write_report_tables(&out, &ev)?;
            pl::write_eval(&out.join("eval.json"), "report", scores.len(), 0, Some(&ev), &cfg)?;
        }
    }
    Ok(())
}

fn must_exist(p: &Path) -> pl::Result<PathBuf> {
    if p.is_file() {
        Ok(p.to_path_buf())
    } else {
        Err(PipelineError::Usage(format!("input file {} not found", p.display())))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                PipelineError::Usage(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
