//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 on a usage error, 2 when the command itself
//! fails (unreadable input, degenerate data, invalid parameters).

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::baselines::{
    fit_fixed, fit_hybrid, hybrid_classify, mce_classify, threshold_classify, Feature, HYBRID_CSV_HEADER,
};
use crate::crfmodel::CrfParams;
use crate::error::{Error, Result};
use crate::evaluation::{
    evaluate_images, load_labelled, parse_summary_csv, render_table, write_report, EvalConfig, Method,
};
use crate::imaging::{compute_features, load_image, load_image_with_mask, PixelImage};
use crate::inference::{save_overlay, IcmOptions};
use crate::manifest::{load_manifest, ManifestEntry, Split};
use crate::mask::Mask;
use crate::pipeline::{detect, SegmentConfig, Segmentation};
use crate::raster::{encode_regions, write_features, write_file};
use crate::regions::MeanShiftParams;
use crate::synthgen::{corpus_items, write_corpus};
use crate::training::{train_pipeline, BetaGrid, TrainConfig, TrainSplit};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

pub const DEFAULT_METHODS: &str = "crf,crf-beta0,fixed-nbr,mce-nbr,mce-nsv,hybrid";

#[derive(Debug, Parser)]
#[command(name = "cloudcrf", version, about = "CRF cloud detection for ground-based sky images")]
pub struct Cli {
    /// Worker threads for per-image parallelism.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// JSON configuration file; command-line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Repeat for more log output (info, then debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default, Clone)]
pub struct SegmentFlags {
    /// Site neighbourhood radius in pixels.
    #[arg(long)]
    pub neighbor_radius: Option<f64>,
    /// Mean-shift spatial bandwidth in pixels.
    #[arg(long)]
    pub spatial_bandwidth: Option<f64>,
    /// Mean-shift range bandwidth in 8-bit colour units.
    #[arg(long)]
    pub range_bandwidth: Option<f64>,
    /// Regions smaller than this are merged into a neighbour.
    #[arg(long)]
    pub min_region_size: Option<usize>,
}

#[derive(Debug, Args, Default, Clone)]
pub struct IcmFlags {
    /// Include neighbours' interaction terms in each ICM update.
    #[arg(long)]
    pub icm_exact_local: bool,
    #[arg(long)]
    pub max_sweeps: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus with truth masks and a manifest.
    Synth {
        #[arg(long, default_value_t = 30)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Images tagged for the association fit.
        #[arg(long, default_value_t = 0)]
        assoc: usize,
        /// Images tagged for the interaction weight search.
        #[arg(long, default_value_t = 0)]
        beta: usize,
        #[arg(long, default_value_t = 640)]
        width: u32,
        #[arg(long, default_value_t = 480)]
        height: u32,
    },
    /// Write NBR and NSV rasters (`<out>.nbr.nimf`, `<out>.nsv.nimf`).
    Features {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        ignore_mask: Option<PathBuf>,
    },
    /// Write the region map and site graph of one image.
    Segment {
        #[arg(long)]
        image: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        ignore_mask: Option<PathBuf>,
        #[command(flatten)]
        seg: SegmentFlags,
    },
    /// Fit CRF parameters from the assoc and beta images of a manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Interaction weight grid `min:max:step`.
        #[arg(long)]
        beta_grid: Option<BetaGrid>,
        /// Fit the association on pixels instead of sites.
        #[arg(long)]
        per_pixel: bool,
        /// Also write the error-versus-beta curve as CSV.
        #[arg(long)]
        curve: Option<PathBuf>,
        #[command(flatten)]
        seg: SegmentFlags,
        #[command(flatten)]
        icm: IcmFlags,
    },
    /// Label one image.
    Infer {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        overlay: Option<PathBuf>,
        #[arg(long)]
        ignore_mask: Option<PathBuf>,
        #[command(flatten)]
        seg: SegmentFlags,
        #[command(flatten)]
        icm: IcmFlags,
    },
    /// Thresholding baselines over the test images of a manifest.
    Baseline {
        #[command(subcommand)]
        which: BaselineCommand,
    },
    /// Compare methods on the test images of a manifest.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory for report.csv, summary.csv and table.txt.
        #[arg(long)]
        out: PathBuf,
        /// CRF parameters; required for the crf methods.
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long, default_value = DEFAULT_METHODS)]
        methods: String,
        #[arg(long)]
        ci_level: Option<f64>,
        /// Summary CSV of reference numbers to print alongside.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[command(flatten)]
        seg: SegmentFlags,
        #[command(flatten)]
        icm: IcmFlags,
    },
}

#[derive(Debug, Subcommand)]
pub enum BaselineCommand {
    /// Threshold trained on the manifest's training images.
    Fixed {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "nbr")]
        feature: Feature,
    },
    /// Per-image minimum cross entropy threshold.
    Mce {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "nbr")]
        feature: Feature,
    },
    /// Fixed or adaptive NBR threshold chosen by the spread of NBR.
    Hybrid {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Settings that may come from a `--config` file.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub mean_shift: Option<MeanShiftParams>,
    pub neighbor_radius: Option<f64>,
    pub icm: Option<IcmOptions>,
    pub beta_grid: Option<String>,
    pub ci_level: Option<f64>,
    pub per_pixel: Option<bool>,
    pub jobs: Option<usize>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse("config", e.to_string()))
    }
}

/// Fully resolved settings, logged for provenance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EffectiveConfig {
    pub segment: SegmentConfig,
    pub icm: IcmOptions,
    pub beta_grid: BetaGrid,
    pub ci_level: f64,
    pub per_pixel: bool,
    pub jobs: usize,
}

impl Default for EffectiveConfig {
    fn default() -> Self {
        Self {
            segment: SegmentConfig::default(),
            icm: IcmOptions::default(),
            beta_grid: BetaGrid::default(),
            ci_level: EvalConfig::default().ci_level,
            per_pixel: false,
            jobs: 1,
        }
    }
}

impl EffectiveConfig {
    fn apply_file(&mut self, file: &FileConfig) -> Result<()> {
        if let Some(ms) = file.mean_shift {
            self.segment.mean_shift = ms;
        }
        if let Some(r) = file.neighbor_radius {
            self.segment.neighbor_radius = r;
        }
        if let Some(icm) = file.icm {
            self.icm = icm;
        }
        if let Some(g) = &file.beta_grid {
            self.beta_grid = g.parse()?;
        }
        if let Some(l) = file.ci_level {
            self.ci_level = l;
        }
        if let Some(p) = file.per_pixel {
            self.per_pixel = p;
        }
        if let Some(j) = file.jobs {
            self.jobs = j;
        }
        Ok(())
    }

    fn apply_segment(&mut self, f: &SegmentFlags) {
        let ms = &mut self.segment.mean_shift;
        if let Some(v) = f.spatial_bandwidth {
            ms.spatial_bandwidth = v;
        }
        if let Some(v) = f.range_bandwidth {
            ms.range_bandwidth = v;
        }
        if let Some(v) = f.min_region_size {
            ms.min_region_size = v;
        }
        if let Some(v) = f.neighbor_radius {
            self.segment.neighbor_radius = v;
        }
    }

    fn apply_icm(&mut self, f: &IcmFlags) {
        if f.icm_exact_local {
            self.icm.exact_local = true;
        }
        if let Some(v) = f.max_sweeps {
            self.icm.max_sweeps = v;
        }
    }

    fn validate(&self) -> Result<()> {
        self.segment.mean_shift.validate()?;
        if !(self.segment.neighbor_radius >= 0.0 && self.segment.neighbor_radius.is_finite()) {
            return Err(Error::InvalidParams("neighbor radius must be non-negative".into()));
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(Error::InvalidParams(format!("ci level {} outside (0, 1)", self.ci_level)));
        }
        if self.jobs == 0 {
            return Err(Error::InvalidParams("--jobs must be at least 1".into()));
        }
        if self.icm.max_sweeps == 0 {
            return Err(Error::InvalidParams("max sweeps must be at least 1".into()));
        }
        Ok(())
    }
}

fn resolve(cli: &Cli) -> Result<EffectiveConfig> {
    let mut cfg = EffectiveConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_file(&FileConfig::load(path)?)?;
    }
    match &cli.command {
        Command::Segment { seg, .. } => cfg.apply_segment(seg),
        Command::Train {
            seg,
            icm,
            beta_grid,
            per_pixel,
            ..
        } => {
            cfg.apply_segment(seg);
            cfg.apply_icm(icm);
            if let Some(g) = beta_grid {
                cfg.beta_grid = *g;
            }
            if *per_pixel {
                cfg.per_pixel = true;
            }
        }
        Command::Infer { seg, icm, .. } => {
            cfg.apply_segment(seg);
            cfg.apply_icm(icm);
        }
        Command::Evaluate {
            seg, icm, ci_level, ..
        } => {
            cfg.apply_segment(seg);
            cfg.apply_icm(icm);
            if let Some(l) = ci_level {
                cfg.ci_level = *l;
            }
        }
        _ => {}
    }
    if let Some(j) = cli.jobs {
        cfg.jobs = j;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .format_timestamp(None)
        .try_init();
}

/// Parse `argv` (program name first), run the command and return the exit
/// code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    init_logging(cli.verbose);
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_DATA
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let cfg = resolve(cli)?;
    log::info!("effective config: {}", serde_json::to_string(&cfg)?);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| Error::InvalidParams(e.to_string()))?;
    pool.install(|| dispatch(&cli.command, &cfg))
}

fn dispatch(command: &Command, cfg: &EffectiveConfig) -> Result<()> {
    match command {
        Command::Synth {
            count,
            seed,
            out,
            assoc,
            beta,
            width,
            height,
        } => {
            if assoc + beta > *count {
                return Err(Error::InvalidParams("--assoc + --beta exceeds --count".into()));
            }
            let items = corpus_items(*count, *seed, *width, *height);
            let manifest = write_corpus(out, &items, *assoc, *beta)?;
            log::info!("wrote {count} images and {}", manifest.display());
            Ok(())
        }
        Command::Features {
            image,
            out,
            ignore_mask,
        } => {
            let img = open_image(image, ignore_mask.as_deref())?;
            write_features(out, &compute_features(&img))
        }
        Command::Segment {
            image,
            out,
            ignore_mask,
            ..
        } => {
            let img = open_image(image, ignore_mask.as_deref())?;
            let seg = Segmentation::compute(&img, &cfg.segment)?;
            create_dir(out)?;
            let stem = file_stem(image);
            write_file(&out.join(format!("{stem}.regions.nimf")), &encode_regions(&seg.regions))?;
            write_text(&out.join(format!("{stem}.sites.csv")), &seg.graph.to_csv())?;
            log::info!("{}: {} regions", image.display(), seg.regions.region_count());
            Ok(())
        }
        Command::Train {
            manifest, out, curve, ..
        } => {
            let entries = load_manifest(manifest)?;
            let split = training_split(&entries)?;
            let train_cfg = TrainConfig {
                segment: cfg.segment,
                beta_grid: cfg.beta_grid,
                icm: cfg.icm,
                per_pixel: cfg.per_pixel,
            };
            let outcome = train_pipeline(&split, &train_cfg)?;
            outcome.params.save(out)?;
            if let Some(path) = curve {
                let mut text = String::from("beta,pixel_errors\n");
                for (b, e) in &outcome.beta.curve {
                    text.push_str(&format!("{b},{e}\n"));
                }
                write_text(path, &text)?;
            }
            Ok(())
        }
        Command::Infer {
            params,
            image,
            out,
            overlay,
            ignore_mask,
            ..
        } => {
            let params = CrfParams::load(params)?;
            let img = open_image(image, ignore_mask.as_deref())?;
            let (mask, seg, outcome) = detect(&img, &params, &cfg.segment, &cfg.icm)?;
            log::info!(
                "{}: {} sites, {} sweeps",
                image.display(),
                seg.graph.len(),
                outcome.sweeps
            );
            mask.save_png(out)?;
            if let Some(path) = overlay {
                save_overlay(&img, &mask, path)?;
            }
            Ok(())
        }
        Command::Baseline { which } => run_baseline(which),
        Command::Evaluate {
            manifest,
            out,
            params,
            methods,
            reference,
            ..
        } => {
            let entries = load_manifest(manifest)?;
            let (train, test) = partition_entries(&entries);
            let test = if test.is_empty() {
                log::warn!("manifest has no test images; evaluating on every image");
                entries.clone()
            } else {
                test
            };
            let methods = build_methods(methods, params.as_deref(), &train)?;
            let images = load_labelled(&test)?;
            let eval_cfg = EvalConfig {
                segment: cfg.segment,
                icm: cfg.icm,
                ci_level: cfg.ci_level,
            };
            let report = evaluate_images(&methods, &images, &eval_cfg)?;
            create_dir(out)?;
            write_report(out, &report)?;
            print!("{}", report.table());
            if let Some(path) = reference {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                println!("\nReference");
                print!("{}", render_table(&parse_summary_csv(&text)?));
            }
            Ok(())
        }
    }
}

fn open_image(path: &Path, ignore: Option<&Path>) -> Result<PixelImage> {
    match ignore {
        Some(_) => load_image_with_mask(path, ignore),
        None => load_image(path),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into())
}

/// Training entries (assoc and beta splits) and test entries.
fn partition_entries(entries: &[ManifestEntry]) -> (Vec<ManifestEntry>, Vec<ManifestEntry>) {
    entries.iter().cloned().partition(|e| e.split != Split::Test)
}

fn load_pairs(entries: &[ManifestEntry]) -> Result<Vec<(PixelImage, Mask)>> {
    Ok(load_labelled(entries)?
        .into_iter()
        .map(|(_, img, truth)| (img, truth))
        .collect())
}

/// Assoc and beta halves from the manifest. A manifest without split tags
/// is cut in half in file order.
fn training_split(entries: &[ManifestEntry]) -> Result<TrainSplit> {
    let pick = |s: Split| entries.iter().filter(|e| e.split == s).cloned().collect::<Vec<_>>();
    let (assoc, beta) = (pick(Split::Assoc), pick(Split::Beta));
    let (assoc, beta) = if assoc.is_empty() && beta.is_empty() {
        log::warn!("manifest has no assoc/beta tags; splitting its images in half");
        let labelled: Vec<ManifestEntry> = entries.iter().filter(|e| e.truth.is_some()).cloned().collect();
        let mid = labelled.len() / 2;
        (labelled[..mid].to_vec(), labelled[mid..].to_vec())
    } else {
        (assoc, beta)
    };
    Ok(TrainSplit {
        assoc_images: load_pairs(&assoc)?,
        beta_images: load_pairs(&beta)?,
    })
}

fn training_pairs(train: &[ManifestEntry], why: &str) -> Result<Vec<(PixelImage, Mask)>> {
    let pairs = load_pairs(train)?;
    if pairs.is_empty() {
        return Err(Error::EmptyInput(format!("{why} needs assoc or beta images in the manifest")));
    }
    Ok(pairs)
}

fn build_methods(list: &str, params: Option<&Path>, train: &[ManifestEntry]) -> Result<Vec<Method>> {
    let names: Vec<&str> = list.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    let params = match params {
        Some(p) => Some(CrfParams::load(p)?),
        None => None,
    };
    let needs_training = names.iter().any(|n| n.starts_with("fixed") || *n == "hybrid");
    let pairs = if needs_training {
        training_pairs(train, "fixed and hybrid baselines")?
    } else {
        Vec::new()
    };
    let mut fixed_nbr = None;
    let mut methods = Vec::new();
    for name in names {
        let crf_params = || params.ok_or_else(|| Error::InvalidParams(format!("method {name} needs --params")));
        let method = match name {
            "crf" => Method::Crf {
                name: name.into(),
                params: crf_params()?,
            },
            "crf-beta0" => Method::Crf {
                name: name.into(),
                params: crf_params()?.with_beta(0.0),
            },
            "fixed-nbr" | "fixed-nsv" => {
                let feature: Feature = name["fixed-".len()..].parse()?;
                let t = fit_fixed(&pairs, feature)?;
                if feature == Feature::Nbr {
                    fixed_nbr = Some(t.threshold);
                }
                Method::Fixed {
                    feature,
                    threshold: t.threshold,
                }
            }
            "mce-nbr" | "mce-nsv" => Method::Adaptive {
                feature: name["mce-".len()..].parse()?,
            },
            "hybrid" => {
                let fixed_t = match fixed_nbr {
                    Some(t) => t,
                    None => fit_fixed(&pairs, Feature::Nbr)?.threshold,
                };
                let (sigma, _) = fit_hybrid(&pairs, fixed_t)?;
                Method::Hybrid {
                    sigma_threshold: sigma,
                    fixed_threshold: fixed_t,
                }
            }
            other => return Err(Error::InvalidParams(format!("unknown method {other:?}"))),
        };
        methods.push(method);
    }
    if methods.is_empty() {
        return Err(Error::InvalidParams("no methods selected".into()));
    }
    Ok(methods)
}

fn run_baseline(which: &BaselineCommand) -> Result<()> {
    match which {
        BaselineCommand::Fixed {
            manifest,
            out,
            feature,
        } => {
            let entries = load_manifest(manifest)?;
            let (train, test) = partition_entries(&entries);
            let t = fit_fixed(&training_pairs(&train, "the fixed baseline")?, *feature)?;
            create_dir(out)?;
            for e in &test {
                let feats = compute_features(&load_image(&e.image)?);
                let mask = threshold_classify(&feats, t.threshold, *feature, feature.cloud_direction());
                mask.save_png(&out.join(format!("{}.fixed.png", file_stem(&e.image))))?;
            }
            let json = serde_json::json!({
                "feature": feature,
                "threshold": t.threshold,
                "training_errors": t.errors,
            });
            write_text(&out.join("fixed.json"), &(serde_json::to_string_pretty(&json)? + "\n"))
        }
        BaselineCommand::Mce {
            manifest,
            out,
            feature,
        } => {
            let entries = load_manifest(manifest)?;
            create_dir(out)?;
            let mut csv = String::from("image,bin,threshold\n");
            for e in &entries {
                let feats = compute_features(&load_image(&e.image)?);
                let (mask, t) = mce_classify(&feats, *feature)?;
                mask.save_png(&out.join(format!("{}.mce.png", file_stem(&e.image))))?;
                csv.push_str(&format!("{},{},{}\n", e.name(), t.bin, t.threshold));
            }
            write_text(&out.join("mce.csv"), &csv)
        }
        BaselineCommand::Hybrid { manifest, out } => {
            let entries = load_manifest(manifest)?;
            let (train, test) = partition_entries(&entries);
            let pairs = training_pairs(&train, "the hybrid baseline")?;
            let fixed_t = fit_fixed(&pairs, Feature::Nbr)?.threshold;
            let (sigma, _) = fit_hybrid(&pairs, fixed_t)?;
            log::info!("hybrid: fixed threshold {fixed_t}, sigma threshold {sigma}");
            create_dir(out)?;
            let mut csv = format!("{HYBRID_CSV_HEADER}\n");
            for e in &test {
                let feats = compute_features(&load_image(&e.image)?);
                let outcome = hybrid_classify(&feats, sigma, fixed_t)?;
                outcome
                    .mask
                    .save_png(&out.join(format!("{}.hybrid.png", file_stem(&e.image))))?;
                csv.push_str(&outcome.csv_record(&e.name()));
                csv.push('\n');
            }
            write_text(&out.join("hybrid.csv"), &csv)
        }
    }
}
