//! `groundmix` command line tool.
//!
//! Exit codes: 0 on success, 1 for invalid arguments or inputs, 2 for I/O
//! failures. Diagnostics go to stderr; machine-readable results go to files.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use thiserror::Error;

use groundmix::augment::{apply_plan, paste_plane, plan_augmentation, rng_for, AugmentConfig, AugmentError};
use groundmix::dataset::{compute_stats, load_manifest, render_overlay, save_manifest, DatasetError, DatasetManifest, PlaneSource, Sample};
use groundmix::eval::{evaluate, load_detections, EvalError};
use groundmix::imaging;
use groundmix::patchbank::{PatchBank, PatchError};
use groundmix::plane::fit_boxes;

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            Self::Invalid(_) => 1,
            Self::Io(_) => 2,
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        if e.is_validation() {
            Self::Invalid(e.to_string())
        } else {
            Self::Io(e.to_string())
        }
    }
}

impl From<AugmentError> for CliError {
    fn from(e: AugmentError) -> Self {
        Self::Invalid(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Dataset(d) => d.into(),
            other => Self::Invalid(other.to_string()),
        }
    }
}

impl From<PatchError> for CliError {
    fn from(e: PatchError) -> Self {
        match e {
            PatchError::Dataset(d) => d.into(),
            other => Self::Invalid(other.to_string()),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

#[derive(Parser, Debug)]
#[command(name = "groundmix", version, about = "Ground-aware augmentation and evaluation for monocular 3D detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Augment a dataset and write the result as a new dataset.
    Augment(AugmentArgs),
    /// Score detections against ground truth.
    Evaluate(EvaluateArgs),
    /// Write dataset histograms as CSV files.
    Stats(StatsArgs),
    /// Fit a ground plane per image and write it as CSV.
    PlaneFit(PlaneFitArgs),
    /// Draw 3D wireframes and 2D boxes over the images.
    Render(RenderArgs),
}

#[derive(clap::Args, Debug)]
struct AugmentArgs {
    /// Input manifest.
    #[arg(long)]
    input: PathBuf,
    /// Output directory; receives manifest.json, images/ and report.jsonl.
    #[arg(long)]
    output: PathBuf,
    /// Random seed; every image draws from its own stream derived from it.
    #[arg(long)]
    seed: u64,
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set max_pastes=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker threads (default: all cores). Output does not depend on it.
    #[arg(long)]
    threads: Option<usize>,
    /// Only write the planned operations to <output>/plan.jsonl.
    #[arg(long)]
    dry_run: bool,
    /// CSV of `object_uid,difficulty` scores for the patch bank.
    #[arg(long)]
    difficulty: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
struct EvaluateArgs {
    /// Ground-truth manifest.
    #[arg(long)]
    gt: PathBuf,
    /// Detections, one JSON object per line.
    #[arg(long)]
    detections: PathBuf,
    /// Write per-class metrics as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PlaneArg {
    /// Plane stored in the manifest.
    Stored,
    /// Plane fitted to each image's boxes.
    Fit,
    /// Stored plane, falling back to a fit.
    Auto,
    /// Skip the rotation histogram.
    None,
}

#[derive(clap::Args, Debug)]
struct StatsArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Plane used for the rotation histogram.
    #[arg(long, value_enum, default_value = "auto")]
    plane: PlaneArg,
}

#[derive(clap::Args, Debug)]
struct PlaneFitArgs {
    #[arg(long)]
    input: PathBuf,
    /// Output CSV with columns image_id,nx,ny,nz,d.
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args, Debug)]
struct RenderArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Restrict to these image ids.
    #[arg(long = "image")]
    images: Vec<String>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Augment(a) => augment(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Stats(a) => stats(a),
        Command::PlaneFit(a) => plane_fit(a),
        Command::Render(a) => render(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn require_file(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(io_err(path, "no such file"))
    }
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn manifest_root(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new("."))
}

fn load_samples(m: &DatasetManifest, root: &Path) -> Result<Vec<Sample>, CliError> {
    m.images.par_iter().map(|r| r.load_sample(root).map_err(CliError::from)).collect()
}

fn load_config(args: &AugmentArgs) -> Result<AugmentConfig, CliError> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            AugmentConfig::parse(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?
        }
        None => AugmentConfig::default(),
    };
    for o in &args.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| CliError::Invalid(format!("--set expects KEY=VALUE, got {o:?}")))?;
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn apply_difficulties(bank: &mut PatchBank, path: &Path) -> Result<(), CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("object_uid") {
            continue;
        }
        let bad = |m: String| CliError::Invalid(format!("{}:{}: {m}", path.display(), i + 1));
        let (uid, score) = line.rsplit_once(',').ok_or_else(|| bad("expected object_uid,difficulty".into()))?;
        let score: f64 = score.trim().parse().map_err(|_| bad(format!("bad score {score:?}")))?;
        match bank.update_difficulty(uid.trim(), score) {
            Ok(()) => {}
            // Objects rejected by the intrusion filter have no patch.
            Err(PatchError::UnknownUid(_)) => {}
            Err(e) => return Err(bad(e.to_string())),
        }
    }
    Ok(())
}

fn augment(args: AugmentArgs) -> Result<(), CliError> {
    require_file(&args.input)?;
    if let Some(c) = &args.config {
        require_file(c)?;
    }
    if let Some(d) = &args.difficulty {
        require_file(d)?;
    }
    if args.threads == Some(0) {
        return Err(CliError::Invalid("--threads must be at least 1".into()));
    }
    let cfg = load_config(&args)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.threads.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Io(e.to_string()))?;
    pool.install(|| run_augment(&args, &cfg))
}

fn run_augment(args: &AugmentArgs, cfg: &AugmentConfig) -> Result<(), CliError> {
    let manifest = load_manifest(&args.input)?;
    let samples = load_samples(&manifest, manifest_root(&args.input))?;
    eprintln!("loaded {} images with {} objects", samples.len(), manifest.box_count());

    let mut bank = PatchBank::new(cfg.bank.clone())?;
    let mut rejected = 0;
    for s in &samples {
        rejected += bank.insert_sample(s).1.len();
    }
    if let Some(path) = &args.difficulty {
        apply_difficulties(&mut bank, path)?;
    }
    eprintln!("patch bank: {} patches, {} objects rejected", bank.len(), rejected);
    let snapshot = bank.snapshot();

    let n = samples.len();
    let plans: Vec<_> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = rng_for(args.seed, &s.image_id);
            let has_plane = paste_plane(s).is_some();
            let plan = plan_augmentation(&s.image_id, i, s.size(), n, has_plane, cfg, &mut rng);
            (plan, rng)
        })
        .collect();

    create_dir(&args.output)?;
    if args.dry_run {
        let mut lines = String::new();
        for (plan, _) in &plans {
            lines.push_str(&serde_json::to_string(plan).expect("plan serializes"));
            lines.push('\n');
        }
        let path = args.output.join("plan.jsonl");
        write_file(&path, lines)?;
        eprintln!("wrote {}", path.display());
        return Ok(());
    }

    let results: Vec<_> = plans
        .into_par_iter()
        .zip(samples.par_iter())
        .map(|((plan, mut rng), s)| {
            let partner = plan.mixup_partner.map(|j| &samples[j]);
            apply_plan(s, &plan, partner, &snapshot, cfg, &mut rng)
        })
        .collect::<Result<_, _>>()?;

    let images_dir = args.output.join("images");
    create_dir(&images_dir)?;
    let mut out = DatasetManifest::new(manifest.split.clone(), manifest.categories.clone());
    let mut next_id = 0u64;
    let mut report = String::new();
    let mut pasted = 0;
    for (sample, r) in &results {
        let mut record = sample.to_record(format!("images/{}.png", sample.image_id));
        for a in &mut record.annotations {
            a.id = next_id;
            next_id += 1;
        }
        out.images.push(record);
        pasted += r.ground_mix.pasted.len();
        report.push_str(&serde_json::to_string(r).expect("report serializes"));
        report.push('\n');
    }
    out.validate()?;
    results
        .par_iter()
        .map(|(s, _)| {
            let path = images_dir.join(format!("{}.png", s.image_id));
            imaging::save_png(&s.image, &path).map_err(|e| io_err(&path, e))
        })
        .collect::<Result<Vec<()>, _>>()?;
    save_manifest(&out, &args.output.join("manifest.json"))?;
    write_file(&args.output.join("report.jsonl"), report)?;
    eprintln!("wrote {} images, {} objects ({} pasted) to {}", out.images.len(), out.box_count(), pasted, args.output.display());
    Ok(())
}

fn evaluate_cmd(args: EvaluateArgs) -> Result<(), CliError> {
    require_file(&args.gt)?;
    require_file(&args.detections)?;
    let manifest = load_manifest(&args.gt)?;
    let dets = load_detections(&args.detections, &manifest)?;
    let report = evaluate(&manifest, &dets);
    print!("{}", report.summary());
    let [ap3d, ..] = report.means();
    println!("AP3D@0.5 = {ap3d:.4}");
    if let Some(out) = &args.out {
        write_file(out, report.to_csv())?;
    }
    Ok(())
}

fn stats(args: StatsArgs) -> Result<(), CliError> {
    require_file(&args.input)?;
    let manifest = load_manifest(&args.input)?;
    let source = match args.plane {
        PlaneArg::Stored => PlaneSource::Stored,
        PlaneArg::Fit => PlaneSource::Fitted,
        PlaneArg::Auto => PlaneSource::StoredOrFitted,
        PlaneArg::None => PlaneSource::Skip,
    };
    let st = compute_stats(&manifest, source)?;
    create_dir(&args.out_dir)?;
    write_file(&args.out_dir.join("depth.csv"), st.depth.to_csv())?;
    if let Some(r) = &st.rotation {
        write_file(&args.out_dir.join("rotation.csv"), r.to_csv())?;
    }
    write_file(&args.out_dir.join("width.csv"), st.width.to_csv())?;
    write_file(&args.out_dir.join("height.csv"), st.height.to_csv())?;
    write_file(&args.out_dir.join("length.csv"), st.length.to_csv())?;
    write_file(&args.out_dir.join("categories.csv"), st.categories_csv(&manifest))?;
    eprintln!("{} boxes; {} left out of the rotation histogram", st.box_count, st.rotation_skipped);
    Ok(())
}

fn plane_fit(args: PlaneFitArgs) -> Result<(), CliError> {
    require_file(&args.input)?;
    let manifest = load_manifest(&args.input)?;
    let mut csv = String::from("image_id,nx,ny,nz,d\n");
    let mut skipped = 0;
    for img in &manifest.images {
        match fit_boxes(img.annotations.iter().map(|a| &a.box3d)) {
            Ok(p) => {
                // Adding zero turns -0 into 0.
                let [nx, ny, nz] = [p.normal.x + 0.0, p.normal.y + 0.0, p.normal.z + 0.0];
                csv.push_str(&format!("{},{nx},{ny},{nz},{}\n", img.id, p.offset));
            }
            Err(e) => {
                skipped += 1;
                eprintln!("{}: {e}", img.id);
            }
        }
    }
    write_file(&args.out, csv)?;
    eprintln!("fitted {} of {} images", manifest.images.len() - skipped, manifest.images.len());
    Ok(())
}

fn render(args: RenderArgs) -> Result<(), CliError> {
    require_file(&args.input)?;
    let manifest = load_manifest(&args.input)?;
    for id in &args.images {
        if manifest.image(id).is_none() {
            return Err(CliError::Invalid(format!("unknown image {id:?}")));
        }
    }
    create_dir(&args.out_dir)?;
    let root = manifest_root(&args.input);
    manifest
        .images
        .par_iter()
        .filter(|r| args.images.is_empty() || args.images.contains(&r.id))
        .map(|r| {
            let sample = r.load_sample(root)?;
            render_overlay(&sample, &args.out_dir.join(format!("{}.png", r.id)))?;
            Ok(())
        })
        .collect::<Result<Vec<()>, CliError>>()?;
    Ok(())
}
