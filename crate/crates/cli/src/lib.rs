//! Command-line front end: matching, toy training and the verification
//! suites. [`run`] maps outcomes to exit codes: 0 success, 1 usage error or
//! unreadable input, 2 verification failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use spotmatch::checkpoint;
use spotmatch::coarse::export_matches;
use spotmatch::config::RunConfig;
use spotmatch::geometry::parse_intrinsics;
use spotmatch::image::{render_overlay, Image};
use spotmatch::model::{match_pair, CameraPair, GridPolicy, ModelParams};
use spotmatch::train::{train_loop, TrainEvent};
use spotmatch::verify::{self, Check};
use spotmatch::{Params, Real, TrainParams};

/// Images are cropped to a multiple of the coarsest pyramid stride.
const STRIDE: usize = 32;

#[derive(Debug, Parser)]
#[command(name = "spotmatch", version, about = "Detector-free local feature matching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Match two images and write `x_ref y_ref x_src y_src conf` lines.
    Match {
        image_ref: PathBuf,
        image_src: PathBuf,
        /// Intrinsics files (nine numbers, row-major) for both images;
        /// enables adaptive source windows.
        #[arg(long, num_args = 2, value_names = ["FILE_REF", "FILE_SRC"])]
        intrinsics: Option<Vec<PathBuf>>,
        /// Checkpoint; its configuration is read from `<ckpt>.cfg`.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Output file; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Side-by-side overlay (binary PPM).
        #[arg(long)]
        viz: Option<PathBuf>,
    },
    /// Train on synthetic warp pairs, printing `step loss l_s l_c l_f lr`.
    TrainToy {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint written after every epoch, with its configuration in
        /// `<out>.cfg`.
        #[arg(long, default_value = "spotmatch.ckpt")]
        out: PathBuf,
    },
    /// Depth recovery and window sizing against rendered two-view scenes.
    VerifyGeometry {
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
    /// Time the sparse attention operator over plan lengths.
    BenchSparse {
        #[arg(long, value_delimiter = ',', default_values_t = [1024, 2048, 4096])]
        sizes: Vec<usize>,
        /// Query and key token count.
        #[arg(long, default_value_t = 128)]
        tokens: usize,
        #[arg(long, default_value_t = 20)]
        runs: usize,
    },
    /// Run every oracle suite.
    Selftest,
}

enum Outcome {
    Success,
    VerificationFailed,
}

/// Runs the tool on `args` (program name first) and returns the exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(Outcome::Success) => 0,
        Ok(Outcome::VerificationFailed) => 2,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn execute(command: Command) -> anyhow::Result<Outcome> {
    match command {
        Command::Match { image_ref, image_src, intrinsics, ckpt, out, viz } => {
            run_match(&image_ref, &image_src, intrinsics.as_deref(), ckpt.as_deref(), out.as_deref(), viz.as_deref())
        }
        Command::TrainToy { config, out } => train_toy(config.as_deref(), &out),
        Command::VerifyGeometry { trials } => verify_geometry(trials),
        Command::BenchSparse { sizes, tokens, runs } => bench_sparse(&sizes, tokens, runs),
        Command::Selftest => selftest(),
    }
}

fn sidecar(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".cfg");
    PathBuf::from(s)
}

fn load_image(path: &Path) -> anyhow::Result<Image> {
    let img = Image::load(path).with_context(|| format!("reading {}", path.display()))?;
    let (w, h) = (img.width / STRIDE * STRIDE, img.height / STRIDE * STRIDE);
    if w == 0 || h == 0 {
        bail!("{}: {}x{} is smaller than {STRIDE}x{STRIDE}", path.display(), img.width, img.height);
    }
    if (w, h) != (img.width, img.height) {
        info!("{}: cropping {}x{} to {w}x{h}", path.display(), img.width, img.height);
    }
    Ok(img.crop(w, h)?.to_gray())
}

fn load_model(ckpt: Option<&Path>) -> anyhow::Result<(RunConfig, Params)> {
    let Some(path) = ckpt else {
        warn!("no checkpoint given; matching with randomly initialized weights");
        let cfg = RunConfig::default();
        let params = ModelParams::init(&cfg.model, &mut ChaCha8Rng::seed_from_u64(cfg.train.seed));
        return Ok((cfg, params));
    };
    let cfg_path = sidecar(path);
    let cfg = if cfg_path.exists() {
        let text = std::fs::read_to_string(&cfg_path).with_context(|| format!("reading {}", cfg_path.display()))?;
        RunConfig::parse(&text).with_context(|| format!("parsing {}", cfg_path.display()))?
    } else {
        warn!("{} not found; assuming the default configuration", cfg_path.display());
        RunConfig::default()
    };
    let params = checkpoint::load::<Real>(path, &cfg.model).with_context(|| format!("loading {}", path.display()))?;
    Ok((cfg, params))
}

fn write_output(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => std::io::stdout().write_all(text.as_bytes()).context("writing standard output"),
    }
}

fn run_match(
    image_ref: &Path,
    image_src: &Path,
    intrinsics: Option<&[PathBuf]>,
    ckpt: Option<&Path>,
    out: Option<&Path>,
    viz: Option<&Path>,
) -> anyhow::Result<Outcome> {
    let (a, b) = (load_image(image_ref)?, load_image(image_src)?);
    let (cfg, params) = load_model(ckpt)?;
    let cams = match intrinsics {
        Some([ka, kb]) => {
            let read = |p: &PathBuf| -> anyhow::Result<_> {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                parse_intrinsics(&text).with_context(|| format!("parsing {}", p.display()))
            };
            Some(CameraPair { k_ref: read(ka)?, k_src: read(kb)? })
        }
        _ => None,
    };
    let policy = cams.as_ref().map_or(GridPolicy::Fixed, GridPolicy::Estimated);
    let output = match_pair(&a.to_feature_map::<Real>(), &b.to_feature_map::<Real>(), &params, &cfg.model, policy)?;
    if cams.is_some() && output.geometry.as_ref().is_none_or(|g| !g.is_valid()) {
        warn!("relative pose unavailable; source windows fixed at {}", cfg.model.fine_window);
    }
    let matches = output.correspondences();
    info!("{} matches", matches.len());
    write_output(out, &export_matches(&matches))?;
    if let Some(path) = viz {
        render_overlay(&a, &b, &matches).save(path).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(Outcome::Success)
}

fn train_toy(config: Option<&Path>, out: &Path) -> anyhow::Result<Outcome> {
    let cfg = match config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            RunConfig::parse(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    let (train, heldout) = cfg.data.datasets()?;
    let mut params = TrainParams::init(&cfg.model, &mut ChaCha8Rng::seed_from_u64(cfg.train.seed));
    checkpoint::write_atomic(&sidecar(out), cfg.to_text().as_bytes())?;
    let mut stdout = std::io::stdout().lock();
    let mut failure = None;
    train_loop(&train, &heldout, &mut params, &cfg.model, &cfg.train, &mut |event, params| match event {
        TrainEvent::Step(s) => {
            let _ = writeln!(stdout, "{}", s.line());
        }
        TrainEvent::Epoch(_) => {
            if failure.is_none() {
                failure = checkpoint::save(out, params, &cfg.model).err();
            }
        }
    })?;
    if let Some(e) = failure {
        return Err(anyhow::Error::new(e).context(format!("writing {}", out.display())));
    }
    Ok(Outcome::Success)
}

fn report(checks: &[Check]) -> Outcome {
    for c in checks {
        println!("{}", c.line());
    }
    if checks.iter().all(|c| c.passed) {
        Outcome::Success
    } else {
        Outcome::VerificationFailed
    }
}

fn verify_geometry(trials: usize) -> anyhow::Result<Outcome> {
    if trials == 0 {
        bail!("--trials must be positive");
    }
    let (check, r) = verify::geometry_oracle(trials, 50, 0);
    println!("max relative depth error {:.3e}", r.max_relative_error);
    Ok(report(&[check, verify::grid_sizing(2000, 1)]))
}

fn bench_sparse(sizes: &[usize], tokens: usize, runs: usize) -> anyhow::Result<Outcome> {
    if sizes.is_empty() || runs == 0 || tokens == 0 {
        bail!("--sizes, --tokens and --runs must be nonempty and positive");
    }
    if let Some(&s) = sizes.iter().find(|&&s| s == 0 || s > tokens * tokens) {
        bail!("plan length {s} outside 1..={}", tokens * tokens);
    }
    let rows = verify::sparse_scaling(tokens, sizes, runs, 0);
    println!("{:>10} {:>14} {:>12} {:>8}", "L_m", "median_us", "aux", "ratio");
    let mut ok = true;
    for (k, r) in rows.iter().enumerate() {
        let ratio = k.checked_sub(1).map(|p| r.seconds / rows[p].seconds);
        let shown = ratio.map_or("-".to_string(), |q| format!("{q:.3}"));
        println!("{:>10} {:>14.3} {:>12} {:>8}", r.entries, 1e6 * r.seconds, r.aux_elements, shown);
        if let Some(q) = ratio.filter(|_| r.entries == 2 * rows[k - 1].entries) {
            ok &= (1.5..=2.5).contains(&q) && r.aux_elements == 2 * rows[k - 1].aux_elements;
        }
    }
    Ok(if ok { Outcome::Success } else { Outcome::VerificationFailed })
}

fn selftest() -> anyhow::Result<Outcome> {
    let mut checks = verify::derived_suite(0);
    checks.push(verify::sparse_complexity(128, 2048, 20, 0));
    Ok(report(&checks))
}
