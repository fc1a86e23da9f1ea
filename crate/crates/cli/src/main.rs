use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gift::descriptor_file;
use gift::eval::{
    evaluate_pair, grid_keypoints, make_extreme_pair, match_nn, parse_keypoints_csv, pck, render_sweep_plot, sweep, sweep_csv,
    EvalManifest, ExtremeMode, MatchSet, PairScore, PckReport, SweepAxis,
};
use gift::group::{GroupGrid, Homography};
use gift::image_io::{fit_within, load_image, save_image, EVAL_MAX};
use gift::pipeline::GiftModel;
use gift::selftest::{run_all, Fault, SelftestOptions};
use gift::tensor::checkpoint::Checkpoint;
use gift::tensor::Tensor;
use gift::textures;
use gift::trainer::{fmt_sig, train_from, write_loss_csv, TrainConfig};
use gift::Error;

/// Pixel distance under which a match counts as correct.
const PCK_THRESHOLD: f64 = 5.0;

#[derive(Parser, Debug)]
#[command(name = "gift", version, about = "Group-invariant local feature descriptors")]
struct Cli {
    /// Random seed; falls back to GIFT_SEED, then 0.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Describe keypoints of one image into a descriptor batch file.
    Extract(ExtractArgs),
    /// Nearest-neighbour matching of two descriptor batch files.
    Match(MatchArgs),
    /// Train a model on images or procedural textures.
    Train(TrainArgs),
    /// PCK over manifest pairs or synthetic extreme pairs.
    Eval(EvalArgs),
    /// PCK against rotation or scale magnitude.
    Sweep(SweepArgs),
    /// Run the equivariance, invariance and gradient suites.
    Selftest(SelftestArgs),
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Model checkpoint; without one a random-weight model is used.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Group CNN depth of the random-weight model.
    #[arg(long, default_value_t = 6)]
    depth: usize,
}

#[derive(Args, Debug)]
struct ImageSetArgs {
    /// Image files (PNG or PPM).
    #[arg(long, num_args = 1..)]
    images: Vec<PathBuf>,
    /// Number of procedural textures, used when no images are given.
    #[arg(long, default_value_t = 8)]
    textures: usize,
    /// Side of the procedural textures.
    #[arg(long, default_value_t = 64)]
    texture_size: usize,
    /// Seed of the first procedural texture.
    #[arg(long, default_value_t = 0)]
    texture_seed: u64,
}

#[derive(Args, Debug)]
struct ExtractArgs {
    #[arg(long)]
    image: PathBuf,
    /// CSV of `x,y` keypoints.
    #[arg(long, conflicts_with = "grid", required_unless_present = "grid")]
    keypoints: Option<PathBuf>,
    /// Use an N x N grid of keypoints instead.
    #[arg(long)]
    grid: Option<usize>,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct MatchArgs {
    /// Query descriptors.
    #[arg(long)]
    a: PathBuf,
    /// Reference descriptors.
    #[arg(long)]
    b: PathBuf,
    /// JSON array of 9 row-major entries mapping A to B.
    #[arg(long)]
    homography: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// PCK report path; defaults to the match CSV path with a .json extension.
    #[arg(long, requires = "homography")]
    pck_out: Option<PathBuf>,
    #[arg(long, default_value_t = PCK_THRESHOLD)]
    threshold: f64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// `key=value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides a configuration entry, e.g. `--set lr=0.001`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[command(flatten)]
    corpus: ImageSetArgs,
    /// Checkpoint to continue from.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum ExtremeArg {
    Es,
    Er,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// JSON manifest of one pair, or an array of them.
    #[arg(long, num_args = 1.., conflicts_with = "synthetic", required_unless_present = "synthetic")]
    manifest: Vec<PathBuf>,
    /// Build extreme scale or rotation pairs from an image set instead.
    #[arg(long)]
    synthetic: Option<ExtremeArg>,
    #[command(flatten)]
    set: ImageSetArgs,
    /// Grid of query points for synthetic pairs and keypoint-free manifests.
    #[arg(long, default_value_t = 8)]
    grid: usize,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum AxisArg {
    Rotation,
    Scale,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long, value_enum)]
    axis: AxisArg,
    #[arg(long, default_value_t = 9)]
    steps: usize,
    #[arg(long, default_value_t = 8)]
    grid: usize,
    #[command(flatten)]
    set: ImageSetArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: PathBuf,
    /// PNG plot of the curve.
    #[arg(long)]
    plot: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum FaultArg {
    ReflectPadding,
}

#[derive(Args, Debug)]
struct SelftestArgs {
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Images for the end-to-end shift check; 0 skips it.
    #[arg(long, default_value_t = 2)]
    images: usize,
    /// Inject a defect the suites must catch.
    #[arg(long, value_enum)]
    fault: Option<FaultArg>,
}

/// A failure with its exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io { .. } | Error::InvalidArgument(_) => 2,
            Error::Shape { .. }
            | Error::EmptyExtent { .. }
            | Error::DegenerateScale { .. }
            | Error::ImageTooSmall { .. }
            | Error::PointOutOfBounds { .. } => 3,
            Error::Corrupt { .. } | Error::Image { .. } | Error::Json { .. } | Error::SingularHomography(_) => 4,
            Error::NonScalarLoss(_) | Error::InsufficientOverlap { .. } | Error::NonFiniteLoss { .. } => 5,
        };
        Failure::new(code, e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let seed = match resolve_seed(cli.seed) {
        Ok(s) => s,
        Err(f) => return report(f),
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.workers.max(1)).build() {
        Ok(p) => p,
        Err(e) => return report(Failure::new(2, format!("cannot start {} workers: {e}", cli.workers))),
    };
    match pool.install(|| run(cli.command, seed)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report(f),
    }
}

fn report(f: Failure) -> ExitCode {
    eprintln!("error: {}", f.message);
    ExitCode::from(f.code)
}

fn resolve_seed(flag: Option<u64>) -> CliResult<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var("GIFT_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Failure::new(2, format!("GIFT_SEED must be an unsigned integer, got {v:?}"))),
        Err(_) => Ok(0),
    }
}

fn run(command: Command, seed: u64) -> CliResult<()> {
    match command {
        Command::Extract(a) => extract(a, seed),
        Command::Match(a) => match_files(a),
        Command::Train(a) => train(a, seed),
        Command::Eval(a) => eval(a, seed),
        Command::Sweep(a) => run_sweep(a, seed),
        Command::Selftest(a) => selftest(a, seed),
    }
}

fn load_model(args: &ModelArgs, seed: u64) -> CliResult<GiftModel> {
    match &args.checkpoint {
        Some(path) => Ok(GiftModel::from_checkpoint(&Checkpoint::load(path)?)?),
        None => Ok(GiftModel::new(seed, args.depth, GroupGrid::default())?),
    }
}

fn load_image_set(args: &ImageSetArgs) -> CliResult<Vec<Tensor>> {
    if args.images.is_empty() {
        if args.textures == 0 {
            return Err(Failure::new(2, "no images given and --textures is 0"));
        }
        return Ok(textures::corpus(args.textures, args.texture_size, args.texture_seed));
    }
    args.images.iter().map(|p| Ok(fit_within(&load_image(p)?, EVAL_MAX).0)).collect()
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| Failure::new(2, format!("{}: {e}", path.display())))
}

/// Rounds to nine significant digits so JSON output carries no more.
fn sig9(v: f64) -> f64 {
    fmt_sig(v).parse().unwrap_or(v)
}

fn save_report(mut report: PckReport, path: &Path) -> CliResult<()> {
    report.mean_pck = sig9(report.mean_pck);
    for p in &mut report.per_pair {
        p.pck = sig9(p.pck);
    }
    Ok(report.save(path)?)
}

fn extract(a: ExtractArgs, seed: u64) -> CliResult<()> {
    let start = Instant::now();
    let model = load_model(&a.model, seed)?;
    let image = load_image(&a.image)?;
    let (image, factor) = fit_within(&image, EVAL_MAX);
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let points = match (&a.keypoints, a.grid) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).map_err(|e| Failure::new(2, format!("{}: {e}", path.display())))?;
            let pts = parse_keypoints_csv(&text).map_err(|e| Failure::new(4, format!("{}: {e}", path.display())))?;
            pts.into_iter().map(|(x, y)| (x * factor, y * factor)).collect()
        }
        (None, Some(n)) => grid_keypoints(w, h, n),
        (None, None) => unreachable!("clap requires --keypoints or --grid"),
    };
    let descriptors = model.describe(&image, &points)?;
    descriptor_file::save(&a.out, &descriptors, model.descriptor_dim())?;
    println!(
        "extracted {} descriptors of dimension {} in {} s",
        descriptors.len(),
        model.descriptor_dim(),
        fmt_sig(start.elapsed().as_secs_f64())
    );
    Ok(())
}

fn load_homography(path: &Path) -> CliResult<Homography> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::new(2, format!("{}: {e}", path.display())))?;
    let values: Vec<f64> = serde_json::from_str(&text).map_err(|e| Failure::new(4, format!("{}: {e}", path.display())))?;
    Homography::from_row_major(&values).map_err(|e| Failure::new(4, format!("{}: {e}", path.display())))
}

fn match_files(a: MatchArgs) -> CliResult<()> {
    let (da, dim_a) = descriptor_file::load(&a.a)?;
    let (db, dim_b) = descriptor_file::load(&a.b)?;
    if dim_a != dim_b {
        return Err(Failure::new(
            3,
            format!("descriptor dimensions differ: {} has {dim_a}, {} has {dim_b}", a.a.display(), a.b.display()),
        ));
    }
    let mut set: MatchSet = match_nn(&da, &db)?;
    set.threshold = a.threshold;
    let homography = a.homography.as_deref().map(load_homography).transpose()?;
    if let Some(h) = &homography {
        let truth = set.query_points.iter().map(|&p| h.apply(p)).collect();
        set = set.with_ground_truth(truth)?;
    }
    write_text(&a.out, &set.to_csv())?;
    println!("matched {} queries against {} references", set.matches.len(), db.len());
    if homography.is_some() {
        let score = pck(&set)?;
        let path = a.pck_out.unwrap_or_else(|| a.out.with_extension("json"));
        let name = format!("{}:{}", a.a.display(), a.b.display());
        save_report(
            PckReport::new(vec![PairScore {
                name,
                pck: score,
                queries: set.matches.len(),
            }]),
            &path,
        )?;
        println!("pck {}", fmt_sig(score));
    }
    Ok(())
}

fn train(a: TrainArgs, seed: u64) -> CliResult<()> {
    let mut config = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Failure::new(2, format!("{}: {e}", path.display())))?;
            TrainConfig::parse(&text)?
        }
        None => TrainConfig::default(),
    };
    for o in &a.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Failure::new(2, format!("--set expects KEY=VALUE, got {o:?}")))?;
        config.set(k.trim(), v.trim()).map_err(|e| Failure::new(2, format!("--set {o}: {e}")))?;
    }
    if let Some(s) = a.steps {
        config.steps = s;
    }
    config.seed = seed;
    config.validate()?;
    let corpus = load_image_set(&a.corpus)?;
    let model = match &a.init {
        Some(path) => GiftModel::from_checkpoint(&Checkpoint::load(path)?)?,
        None => GiftModel::with_pooling(config.seed, config.depth, config.grid(), config.pooling)?,
    };
    let start = Instant::now();
    let every = (config.steps / 20).max(1);
    let outcome = train_from(model, &corpus, &config, |step, loss| {
        if (step + 1) % every == 0 || step + 1 == config.steps {
            eprintln!("step {} loss {}", step + 1, fmt_sig(loss));
        }
    })?;
    outcome.model.to_checkpoint().save(&a.out)?;
    if let Some(path) = &a.loss_csv {
        write_loss_csv(path, &outcome.losses)?;
    }
    println!("trained {} steps in {} s", config.steps, fmt_sig(start.elapsed().as_secs_f64()));
    Ok(())
}

fn load_manifests(path: &Path) -> CliResult<Vec<EvalManifest>> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::new(2, format!("{}: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Failure::new(4, format!("{}: {e}", path.display())))?;
    let parsed = if value.is_array() {
        serde_json::from_value(value)
    } else {
        serde_json::from_value(value).map(|m| vec![m])
    };
    parsed.map_err(|e| Failure::new(4, format!("{}: {e}", path.display())))
}

/// Scores one manifest pair at evaluation resolution.
fn eval_manifest(model: &GiftModel, m: &EvalManifest, base: &Path, grid: usize) -> CliResult<PairScore> {
    let image_a = load_image(base.join(&m.image_a))?;
    let image_b = load_image(base.join(&m.image_b))?;
    let (h0, w0) = (image_a.shape()[1], image_a.shape()[2]);
    let homography = m.validate(w0, h0)?;
    let (image_a, fa) = fit_within(&image_a, EVAL_MAX);
    let (image_b, fb) = fit_within(&image_b, EVAL_MAX);
    let (ha, wa) = (image_a.shape()[1], image_a.shape()[2]);
    let (hb, wb) = (image_b.shape()[1] as f64, image_b.shape()[2] as f64);
    let points: Vec<(f64, f64)> = if m.keypoints.is_empty() {
        grid_keypoints(wa, ha, grid)
    } else {
        m.keypoints.iter().map(|&(x, y)| (x * fa, y * fa)).collect()
    };
    let (qa, qb): (Vec<_>, Vec<_>) = points
        .into_iter()
        .map(|p| {
            let t = homography.apply((p.0 / fa, p.1 / fa));
            (p, (t.0 * fb, t.1 * fb))
        })
        .filter(|(_, q)| q.0 >= 0.0 && q.1 >= 0.0 && q.0 <= wb - 1.0 && q.1 <= hb - 1.0)
        .unzip();
    if qa.is_empty() {
        return Err(Failure::new(3, format!("{}: no keypoint projects into image B", m.source)));
    }
    let da = model.describe(&image_a, &qa)?;
    let db = model.describe(&image_b, &qb)?;
    let set = match_nn(&da, &db)?.with_ground_truth(qb)?;
    Ok(PairScore {
        name: m.source.clone(),
        pck: pck(&set)?,
        queries: set.matches.len(),
    })
}

fn eval(a: EvalArgs, seed: u64) -> CliResult<()> {
    let model = load_model(&a.model, seed)?;
    let mut scores = Vec::new();
    if let Some(kind) = a.synthetic {
        let mode = match kind {
            ExtremeArg::Es => ExtremeMode::Scale,
            ExtremeArg::Er => ExtremeMode::Rotation,
        };
        for (k, image) in load_image_set(&a.set)?.iter().enumerate() {
            let pair = make_extreme_pair(image, mode, seed.wrapping_add(k as u64))?;
            let (set, score) = evaluate_pair(&model, &pair, a.grid)?;
            scores.push(PairScore {
                name: format!("{kind:?}-{k}").to_lowercase(),
                pck: score,
                queries: set.matches.len(),
            });
        }
    } else {
        for path in &a.manifest {
            let base = path.parent().unwrap_or(Path::new("."));
            for m in load_manifests(path)? {
                scores.push(eval_manifest(&model, &m, base, a.grid)?);
            }
        }
    }
    let report = PckReport::new(scores);
    println!("{} pairs, mean pck {}", report.pairs, fmt_sig(report.mean_pck));
    save_report(report, &a.out)
}

fn run_sweep(a: SweepArgs, seed: u64) -> CliResult<()> {
    let model = load_model(&a.model, seed)?;
    let images = load_image_set(&a.set)?;
    let axis = match a.axis {
        AxisArg::Rotation => SweepAxis::Rotation,
        AxisArg::Scale => SweepAxis::Scale,
    };
    let rows = sweep(&model, &images, axis, a.steps, a.grid)?;
    write_text(&a.out, &sweep_csv(&rows))?;
    if let Some(path) = &a.plot {
        save_image(&render_sweep_plot(&rows, 480, 320), path)?;
    }
    for (m, p) in &rows {
        println!("{} {}", fmt_sig(*m), fmt_sig(*p));
    }
    Ok(())
}

fn selftest(a: SelftestArgs, seed: u64) -> CliResult<()> {
    let opts = SelftestOptions {
        seed,
        trials: a.trials,
        fault: match a.fault {
            Some(FaultArg::ReflectPadding) => Fault::ReflectPadding,
            None => Fault::None,
        },
        images: a.images,
    };
    let reports = run_all(&opts)?;
    let mut failed = Vec::new();
    for r in &reports {
        println!(
            "{:<16} {} max_error {} tolerance {} trials {} time {} s",
            r.name,
            if r.passed { "pass" } else { "FAIL" },
            fmt_sig(r.max_error),
            fmt_sig(r.tolerance),
            r.trials,
            fmt_sig(r.elapsed.as_secs_f64())
        );
        if !r.passed {
            failed.push(r.name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::new(1, format!("failed suites: {}", failed.join(", "))))
    }
}
